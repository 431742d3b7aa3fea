"""Data-to-energy Schrödinger bridges by iterative proportional fitting.

Each outer iteration alternates two half-fits over a uniform-kernel path
space: the backward model is trained by maximum likelihood on trajectories
from the current forward process (which starts out as the reference kernel
itself), then the forward model is trained with a grouped log-variance
divergence against the unnormalised terminal density. The off-policy variant
seeds one trajectory per group from MCMC-refined buffer states noised by the
learned backward kernel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from . import autodiff as ad
from .diffusion import TrajectoryBatch, UniformKernel, make_policy_net
from .errors import ConfigError, TrainingError
from .mcmc import make_step_fn, refine_batch
from .nn import AdamW, GradTape, PolicyNet
from .replay import McmcBuffer, ReplayBuffer
from .targets import TargetEnergy

P0Sampler = Callable[[int, np.random.Generator], np.ndarray]


@dataclass
class BridgeConfig:
    n_outer: int
    k_traj: int = 8
    groups_per_batch: int = 16
    backward_steps: int = 300
    forward_steps: int = 300
    mle_batch: int = 64
    lr: float = 1e-3
    lr_decay: float = 1.0  # optimiser lr multiplier applied per outer iteration
    weight_decay: float = 0.0
    converge_window: int = 50
    converge_rel: float = 1e-4
    off_policy: bool = False
    buffer_capacity: int = 4096
    mcmc_steps: int = 20
    mcmc_kind: str = "mh"
    mcmc_h: int = 1
    mcmc_stay_prob: float = 0.9
    seed: int = 0
    hidden: tuple = (128, 128)

    def __post_init__(self):
        if self.k_traj < 2:
            raise ConfigError("k_traj must be >= 2 (the variance needs company)")
        if self.n_outer < 0:
            raise ConfigError("n_outer must be >= 0")


@dataclass
class BridgePair:
    """Forward and backward kernels of the bridge under construction.

    ``fwd_net`` is None until the first forward half-fit: before that the
    forward process IS the reference kernel.
    """

    kernel: UniformKernel
    bwd_net: PolicyNet
    fwd_net: Optional[PolicyNet] = None

    def rollout_forward_from(self, x0: np.ndarray, rng: np.random.Generator) -> TrajectoryBatch:
        if self.fwd_net is None:
            return self.kernel.rollout_reference_forward(x0, rng)
        return self.kernel.rollout_forward(self.fwd_net, x0.shape[0], rng, x0=x0)


def _converged(losses: List[float], window: int, rel: float) -> bool:
    if len(losses) < 2 * window:
        return False
    prev = float(np.mean(losses[-2 * window : -window]))
    cur = float(np.mean(losses[-window:]))
    return (prev - cur) < rel * max(abs(prev), 1e-12)


def fit_backward_mle(
    pair: BridgePair,
    p0_sampler: P0Sampler,
    cfg: BridgeConfig,
    rng: np.random.Generator,
    opt: Optional[AdamW] = None,
) -> List[float]:
    """Ascend the backward path log-likelihood of forward-model trajectories.

    Returns the per-step negative log-likelihood trace (the minimised
    objective); a zero budget leaves the model untouched.
    """
    opt = opt or AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    losses: List[float] = []
    for _ in range(cfg.backward_steps):
        x0 = p0_sampler(cfg.mle_batch, rng)
        traj = pair.rollout_forward_from(x0, rng)
        tape = GradTape(pair.bwd_net)
        ll = pair.kernel.taped_net_logprob(tape, traj, "bwd")
        loss = ad.vmean(ad.mul(ll, np.asarray(-1.0)))
        if not np.isfinite(loss.data):
            raise TrainingError("non-finite backward likelihood")
        grad = tape.gradient(loss)
        pair.bwd_net.unflatten(opt.step(pair.bwd_net.flatten(), grad))
        losses.append(float(loss.data))
        if _converged(losses, cfg.converge_window, cfg.converge_rel):
            break
    return losses


def _group_lv_loss(
    pair: BridgePair,
    traj: TrajectoryBatch,
    energies: np.ndarray,
    group_ids: np.ndarray,
    n_groups: int,
) -> tuple:
    """Mean within-group variance of (log p_fwd - log p_bwd + E)."""
    tape = GradTape(pair.fwd_net)
    fwd = pair.kernel.taped_net_logprob(tape, traj, "fwd")
    const = energies - pair.kernel.net_logprob(pair.bwd_net, traj, "bwd")
    v = ad.add(fwd, const)
    counts = np.bincount(group_ids, minlength=n_groups).astype(np.float64)
    means = np.bincount(group_ids, weights=v.data, minlength=n_groups) / counts
    diff = ad.sub(v, means[group_ids])
    loss = ad.vmean(ad.square(diff))
    return loss, tape, v.data


def pretrain_to_reference(
    net: PolicyNet, kernel: UniformKernel, rng: np.random.Generator,
    n_steps: int = 300, batch: int = 128, lr: float = 5e-3,
) -> None:
    """Fit a net's categorical rows to the reference kernel by cross-entropy,
    so a fresh forward model starts out as (approximately) the reference
    process rather than uniform resampling."""
    from . import autodiff as ad
    from .diffusion import encode_states

    spec, params = kernel.spec, kernel.params
    d, C = spec.d, spec.C
    stay = 1.0 - params.p_flip
    move = params.p_flip / (C - 1)
    opt = AdamW(lr=lr)
    for _ in range(n_steps):
        x = rng.integers(1, C + 1, size=(batch, d))
        t = rng.random(batch)
        ref = np.full((batch, d, C), move)
        np.put_along_axis(ref, (x - 1)[..., None], stay, axis=2)
        tape = GradTape(net)
        logp = ad.log_softmax_rows(
            ad.reshape(tape.forward(encode_states(x, spec, t)), (batch * d, C))
        )
        loss = ad.mul(ad.vsum(ad.mul(logp, ref.reshape(batch * d, C))), np.asarray(-1.0 / batch))
        net.unflatten(opt.step(net.flatten(), tape.gradient(loss)))


def fit_forward_lv(
    pair: BridgePair,
    target: TargetEnergy,
    cfg: BridgeConfig,
    p0_sampler: P0Sampler,
    rng: np.random.Generator,
    buffer: Optional[ReplayBuffer] = None,
    mcmc_buffer: Optional[McmcBuffer] = None,
    opt: Optional[AdamW] = None,
) -> List[float]:
    """Minimise the grouped log-variance divergence over the forward net.

    On-policy groups share a p0 draw across k_traj forward rollouts; the
    off-policy variant generates the first trajectory of each group backward
    from an MCMC-buffer state using the learned backward kernel.
    """
    if pair.fwd_net is None:
        seed_net = np.random.default_rng([cfg.seed, 271828])
        pair.fwd_net = make_policy_net(pair.kernel.spec, list(cfg.hidden), rng=seed_net)
        pretrain_to_reference(pair.fwd_net, pair.kernel, seed_net)
    opt = opt or AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    k = cfg.k_traj
    g = cfg.groups_per_batch
    losses: List[float] = []
    for _ in range(cfg.forward_steps):
        off = cfg.off_policy and mcmc_buffer is not None and len(mcmc_buffer) > 0
        if off:
            xn_seed = mcmc_buffer.sample_uniform(g, rng)
            first = pair.kernel.rollout_backward(xn_seed, rng, bwd_net=pair.bwd_net)
            x0 = first.x0
            rest = pair.kernel.rollout_forward(
                pair.fwd_net, g * (k - 1), rng, x0=np.repeat(x0, k - 1, axis=0)
            )
            states = np.concatenate(
                [
                    first.states[:, :, None, :],
                    rest.states.reshape(rest.states.shape[0], g, k - 1, -1),
                ],
                axis=2,
            ).reshape(first.states.shape[0], g * k, -1)
            n = states.shape[0] - 1
            traj = TrajectoryBatch(
                states, np.full((n, g * k), np.nan), np.full((n, g * k), np.nan)
            )
        else:
            x0 = p0_sampler(g, rng)
            traj = pair.kernel.rollout_forward(
                pair.fwd_net, g * k, rng, x0=np.repeat(x0, k, axis=0)
            )
            if buffer is not None:
                zeros = np.zeros(traj.xn.shape[0])
                buffer.insert_batch(traj.xn, zeros)
        group_ids = np.repeat(np.arange(g), k)
        energies = target.energy(traj.xn)
        loss, tape, _ = _group_lv_loss(pair, traj, energies, group_ids, g)
        if not np.isfinite(loss.data):
            raise TrainingError("non-finite forward LV loss")
        grad = tape.gradient(loss)
        pair.fwd_net.unflatten(opt.step(pair.fwd_net.flatten(), grad))
        losses.append(float(loss.data))
        if _converged(losses, cfg.converge_window, cfg.converge_rel):
            break
    return losses


# ---------------------------------------------------------------------------
# Exact endpoint marginals on enumerable spaces
# ---------------------------------------------------------------------------

EXACT_PUSH_LIMIT = 4096


def _net_transition_matrix(
    kernel: UniformKernel, net: PolicyNet, states: np.ndarray, t: float
) -> np.ndarray:
    """Dense (S, S) one-step matrix of the per-position categorical net kernel."""
    from .diffusion import encode_states
    from .nn import softmax_rows

    s, d = states.shape
    if s > EXACT_PUSH_LIMIT:
        raise ConfigError("state space too large for exact pushforward")
    logits = net.forward(encode_states(states, kernel.spec, t)).reshape(s, d, kernel.spec.C)
    probs = softmax_rows(logits)
    trans = np.ones((s, s))
    for i in range(d):
        trans *= probs[:, i, states[:, i] - 1]
    return trans


def _reference_transition_matrix(kernel: UniformKernel, states: np.ndarray) -> np.ndarray:
    from .metrics import hamming_cost

    ham = hamming_cost(states, states, kernel.spec.C)
    d = states.shape[1]
    stay = np.log1p(-kernel.params.p_flip)
    move = np.log(kernel.params.p_flip / (kernel.spec.C - 1))
    return np.exp((d - ham) * stay + ham * move)


def exact_forward_terminal(
    pair: BridgePair, states: np.ndarray, p0: np.ndarray
) -> np.ndarray:
    """Push an exact X0 distribution through the forward process."""
    p = np.asarray(p0, dtype=np.float64).copy()
    n = pair.kernel.n
    for step in range(n):
        if pair.fwd_net is None:
            trans = _reference_transition_matrix(pair.kernel, states)
        else:
            trans = _net_transition_matrix(pair.kernel, pair.fwd_net, states, step / n)
        p = p @ trans
    return p


def exact_backward_initial(
    pair: BridgePair, states: np.ndarray, p_target: np.ndarray
) -> np.ndarray:
    """Push an exact X_N distribution down through the backward process."""
    p = np.asarray(p_target, dtype=np.float64).copy()
    n = pair.kernel.n
    for step in range(n - 1, -1, -1):
        trans = _net_transition_matrix(pair.kernel, pair.bwd_net, states, (step + 1) / n)
        p = p @ trans
    return p


@dataclass
class IpfDiagnostics:
    iteration: int
    backward_losses: List[float]
    forward_losses: List[float]
    tv_forward_terminal: Optional[float] = None
    tv_backward_initial: Optional[float] = None


def ipf_run(
    cfg: BridgeConfig,
    p0_sampler: P0Sampler,
    target: TargetEnergy,
    kernel: UniformKernel,
    oracle=None,
    p0_exact: Optional[np.ndarray] = None,
) -> tuple:
    """Alternate the two half-fits for n_outer iterations.

    When an enumeration oracle and exact p0 table are supplied, both
    endpoint-marginal total variations are recorded each iteration.
    """
    rng = np.random.default_rng(cfg.seed)
    bwd_seed = np.random.default_rng([cfg.seed, 314159])
    pair = BridgePair(
        kernel=kernel,
        bwd_net=make_policy_net(kernel.spec, list(cfg.hidden), rng=bwd_seed),
    )
    buffer = ReplayBuffer(cfg.buffer_capacity, kernel.spec.d) if cfg.off_policy else None
    mcmc_buffer = McmcBuffer(cfg.buffer_capacity, kernel.spec.d) if cfg.off_policy else None
    bwd_opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    fwd_opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    diags: List[IpfDiagnostics] = []
    step_fn = make_step_fn(
        cfg.mcmc_kind, target, H=cfg.mcmc_h, stay_prob=cfg.mcmc_stay_prob
    ) if cfg.off_policy else None

    for it in range(1, cfg.n_outer + 1):
        bwd_losses = fit_backward_mle(pair, p0_sampler, cfg, rng, opt=bwd_opt)
        if cfg.off_policy and buffer is not None and len(buffer) > 0:
            starts = buffer.sample_prioritised(cfg.groups_per_batch, rng)
            refined = refine_batch(starts, step_fn, cfg.mcmc_steps, rng)
            mcmc_buffer.insert_batch(refined)
        fwd_losses = fit_forward_lv(
            pair, target, cfg, p0_sampler, rng, buffer=buffer, mcmc_buffer=mcmc_buffer,
            opt=fwd_opt,
        )
        bwd_opt.lr *= cfg.lr_decay
        fwd_opt.lr *= cfg.lr_decay
        diag = IpfDiagnostics(it, bwd_losses, fwd_losses)
        if oracle is not None and p0_exact is not None:
            states = oracle.states.astype(np.int64)
            fwd_term = exact_forward_terminal(pair, states, p0_exact)
            bwd_init = exact_backward_initial(pair, states, oracle.probs)
            diag.tv_forward_terminal = float(0.5 * np.abs(fwd_term - oracle.probs).sum())
            diag.tv_backward_initial = float(0.5 * np.abs(bwd_init - p0_exact).sum())
        diags.append(diag)
    return pair, diags
