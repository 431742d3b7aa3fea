"""End-to-end sampler training: interleaved on/off-policy epochs, buffer
maintenance, periodic MCMC exploration, temperature annealing, periodic
evaluation and checkpointing.

The epoch-type pattern is a Bresenham-style schedule whose long-run
off-policy:on-policy ratio equals the configured rational R (R < 1 means
more on-policy epochs than off-policy ones). The first epoch is always
on-policy because the replay buffer starts empty.
"""

from __future__ import annotations

import pickle
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

import numpy as np

from .diffusion import MaskedKernel
from .errors import ConfigError, TrainingError
from .mcmc import make_step_fn, refine_batch
from .metrics import elbo, eubo, forward_terminal_samples, tv_to_oracle
from .nn import AdamW, PolicyNet
from .objectives import LossConfig, importance_log_weights, loss_and_grad
from .replay import McmcBuffer, ReplayBuffer, assemble_offpolicy_batch
from .targets import EnumerationOracle, LatticeTarget, TargetEnergy

RUN_STATE_VERSION = 1


@dataclass
class TrainConfig:
    n_epochs: int
    batch_m: int
    buffer_capacity: int = 12800
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 1e-3
    weight_decay: float = 0.0
    off_policy: bool = True
    ratio_r: Fraction = Fraction(2)  # off-to-on epoch ratio
    mcmc_explore: bool = True
    mcmc_interval: int = 500
    mcmc_steps: int = 100
    mcmc_ratio: float = 0.2
    mcmc_kind: str = "mh"  # mh | sw | categorical
    mcmc_h: int = 1
    mcmc_stay_prob: float = 0.9
    annealing: bool = True
    seed: int = 0
    eval_every: int = 0  # 0 disables periodic evaluation
    eval_samples: int = 1024
    oracle_limit: int = 1 << 14  # enumerate targets up to this many states

    def __post_init__(self):
        if isinstance(self.ratio_r, float):
            self.ratio_r = Fraction(self.ratio_r).limit_denominator(1000)
        elif not isinstance(self.ratio_r, Fraction):
            self.ratio_r = Fraction(self.ratio_r)
        if self.n_epochs < 1 or self.batch_m < 1:
            raise ConfigError("n_epochs and batch_m must be >= 1")
        if not 0.0 <= self.mcmc_ratio <= 1.0:
            raise ConfigError("mcmc sample ratio must lie in [0, 1]")
        if self.off_policy and self.ratio_r <= 0:
            raise ConfigError("off-to-on ratio must be positive")


def anneal_beta(epoch: int, n_epochs: int, enabled: bool = True) -> float:
    """Inverse-temperature multiplier: linear 0 -> 1 over the first half."""
    if not enabled:
        return 1.0
    if not 1 <= epoch <= n_epochs:
        raise ConfigError(f"epoch {epoch} outside 1..{n_epochs}")
    return min(1.0, 2.0 * (epoch - 1) / n_epochs)


@dataclass
class RunState:
    epoch: int
    net: PolicyNet
    opt: AdamW
    c: float
    c_opt: AdamW
    buffer: ReplayBuffer
    mcmc_buffer: McmcBuffer
    rng: np.random.Generator
    on_count: int = 0
    off_count: int = 0
    history: list = field(default_factory=list)


def init_run_state(cfg: TrainConfig, net: PolicyNet, d: int) -> RunState:
    rng = np.random.default_rng(cfg.seed)
    return RunState(
        epoch=0,
        net=net,
        opt=AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay),
        c=0.0,
        c_opt=AdamW(lr=cfg.loss.logz_lr),
        buffer=ReplayBuffer(cfg.buffer_capacity, d),
        mcmc_buffer=McmcBuffer(cfg.buffer_capacity, d),
        rng=rng,
    )


def _is_on_policy(state: RunState, cfg: TrainConfig) -> bool:
    if not cfg.off_policy or state.on_count == 0:
        return True
    r = cfg.ratio_r
    return not (state.off_count * r.denominator < r.numerator * state.on_count)


def train_epoch(
    state: RunState,
    cfg: TrainConfig,
    target: TargetEnergy,
    kernel,
    step_fn: Optional[Callable] = None,
) -> dict:
    """One epoch of the off-policy training loop; returns the epoch record."""
    state.epoch += 1
    epoch = state.epoch
    beta = anneal_beta(epoch, cfg.n_epochs, cfg.annealing)
    rng = state.rng
    on_policy = _is_on_policy(state, cfg)

    if on_policy:
        state.on_count += 1
        traj = kernel.rollout_forward(state.net, cfg.batch_m, rng)
        energies = beta * target.energy(traj.xn)
        traj.energy = energies
        log_w = importance_log_weights(traj, energies, kernel.log_p0(traj.x0))
        state.buffer.insert_batch(traj.xn, log_w, epoch)
    else:
        state.off_count += 1
        xn = assemble_offpolicy_batch(
            state.buffer, state.mcmc_buffer, cfg.batch_m, cfg.mcmc_ratio, rng
        )
        traj = kernel.rollout_backward(xn, rng)
        energies = beta * target.energy(xn)
        traj.energy = energies

    res = loss_and_grad(state.net, kernel, traj, energies, cfg.loss, state.c)
    if not np.isfinite(res.loss):
        raise TrainingError(f"non-finite loss at epoch {epoch}")
    state.net.unflatten(state.opt.step(state.net.flatten(), res.theta_grad))
    if cfg.loss.kind == "tb":
        state.c = float(state.c_opt.step(np.array([state.c]), np.array([res.logz_grad]))[0])

    if cfg.mcmc_explore and (epoch - 1) % cfg.mcmc_interval == 0:
        if step_fn is None:
            step_fn = default_step_fn(cfg, target)
        starts = state.buffer.sample_prioritised(cfg.batch_m, rng)
        refined = refine_batch(starts, step_fn, cfg.mcmc_steps, rng)
        state.mcmc_buffer.insert_batch(refined)

    return {
        "epoch": epoch,
        "loss": res.loss,
        "c": state.c,
        "beta": beta,
        "on_policy": on_policy,
    }


def default_step_fn(cfg: TrainConfig, target: TargetEnergy):
    lattice = target.params if isinstance(target, LatticeTarget) else None
    return make_step_fn(
        cfg.mcmc_kind, target, H=cfg.mcmc_h, stay_prob=cfg.mcmc_stay_prob, lattice=lattice
    )


def _eval_rng(cfg: TrainConfig, epoch: int) -> np.random.Generator:
    # separate stream so evaluation never perturbs the training trajectory
    return np.random.default_rng([cfg.seed, 7919, epoch])


def evaluate(
    state: RunState,
    cfg: TrainConfig,
    target: TargetEnergy,
    kernel,
    oracle: Optional[EnumerationOracle] = None,
    m_eval: Optional[int] = None,
) -> dict:
    rng = _eval_rng(cfg, state.epoch)
    eval_kernel = kernel.retimed() if isinstance(kernel, MaskedKernel) else kernel
    m = m_eval or cfg.eval_samples
    value, se = elbo(state.net, eval_kernel, target, m, rng)
    rec = {"epoch": state.epoch, "elbo": value, "elbo_se": se}
    if oracle is not None:
        true_samples = oracle.sample(m, rng)
        ub, ub_se = eubo(state.net, eval_kernel, target, true_samples, rng)
        samples = forward_terminal_samples(state.net, eval_kernel, m, rng)
        rec.update(
            {
                "eubo": ub,
                "eubo_se": ub_se,
                "tv": tv_to_oracle(samples, oracle),
                "log_z": oracle.log_z,
            }
        )
    return rec


def run(
    cfg: TrainConfig,
    target: TargetEnergy,
    kernel,
    net: Optional[PolicyNet] = None,
    hidden=(128, 128),
    oracle: Optional[EnumerationOracle] = None,
    resume_from=None,
    diag_path=None,
    progress: Optional[Callable[[dict], None]] = None,
    step_fn: Optional[Callable] = None,
) -> RunState:
    """Drive the full training loop; deterministic given the seed."""
    from .diffusion import make_policy_net

    if resume_from is not None:
        state = load_run_state(resume_from, cfg)
    else:
        if net is None:
            net_rng = np.random.default_rng([cfg.seed, 104729])
            net = make_policy_net(kernel.spec, list(hidden), rng=net_rng)
        state = init_run_state(cfg, net, kernel.spec.d)

    if oracle is None and cfg.eval_every:
        n_states = target.spec.C**target.spec.d
        if n_states <= cfg.oracle_limit:
            oracle = EnumerationOracle(target)

    if step_fn is None and cfg.mcmc_explore:
        step_fn = default_step_fn(cfg, target)
    while state.epoch < cfg.n_epochs:
        try:
            rec = train_epoch(state, cfg, target, kernel, step_fn)
        except TrainingError:
            if diag_path is not None:
                save_run_state(state, diag_path)
            raise
        if cfg.eval_every and (
            state.epoch % cfg.eval_every == 0 or state.epoch == cfg.n_epochs
        ):
            rec.update(evaluate(state, cfg, target, kernel, oracle))
        state.history.append(rec)
        if progress is not None:
            progress(rec)
    return state


# ---------------------------------------------------------------------------
# Run-state persistence (full resume support)
# ---------------------------------------------------------------------------


def save_run_state(state: RunState, path) -> None:
    buf_states, buf_logw, buf_epoch = state.buffer.entries()
    payload = {
        "version": RUN_STATE_VERSION,
        "epoch": state.epoch,
        "layer_dims": state.net.layer_dims,
        "params": state.net.flatten(),
        "opt": state.opt.state_dict(),
        "c": state.c,
        "c_opt": state.c_opt.state_dict(),
        "buffer": {
            "capacity": state.buffer.capacity,
            "states": buf_states,
            "log_w": buf_logw,
            "epoch": buf_epoch,
        },
        "mcmc_buffer": {
            "capacity": state.mcmc_buffer.capacity,
            "states": state.mcmc_buffer.entries(),
        },
        "rng_state": state.rng.bit_generator.state,
        "on_count": state.on_count,
        "off_count": state.off_count,
        "history": state.history,
    }
    with open(path, "wb") as fh:
        pickle.dump(payload, fh)


def load_run_state(path, cfg: TrainConfig) -> RunState:
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    if payload.get("version") != RUN_STATE_VERSION:
        raise ConfigError("unsupported run-state version")
    net = PolicyNet(payload["layer_dims"])
    net.unflatten(payload["params"])
    buffer = ReplayBuffer(payload["buffer"]["capacity"], payload["buffer"]["states"].shape[1])
    if payload["buffer"]["states"].shape[0]:
        for x, lw, ep in zip(
            payload["buffer"]["states"], payload["buffer"]["log_w"], payload["buffer"]["epoch"]
        ):
            buffer.insert_batch(x[None, :], np.array([lw]), int(ep))
    mcmc_buffer = McmcBuffer(payload["mcmc_buffer"]["capacity"], payload["buffer"]["states"].shape[1])
    if payload["mcmc_buffer"]["states"].shape[0]:
        mcmc_buffer.insert_batch(payload["mcmc_buffer"]["states"])
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng_state"]
    state = RunState(
        epoch=payload["epoch"],
        net=net,
        opt=AdamW.from_state(payload["opt"]),
        c=payload["c"],
        c_opt=AdamW.from_state(payload["c_opt"]),
        buffer=buffer,
        mcmc_buffer=mcmc_buffer,
        rng=rng,
        on_count=payload["on_count"],
        off_count=payload["off_count"],
        history=list(payload["history"]),
    )
    return state
