"""Masked and uniform discrete diffusion kernels with exact log-probabilities.

States are int64 arrays of symbols in ``1..C``; the mask token is 0 and only
appears in masked diffusion. Everything operates on batches: a trajectory
batch is a rectangular ``(N+1, M, d)`` tensor where trajectories shorter than
N are padded with no-op steps (unmask count 0, log-probability 0).

Gradient evaluation is separated from sampling: rollouts draw states without
any tape, and ``taped_forward_logprob`` re-evaluates the policy's path
log-probability of a frozen trajectory batch through a :class:`GradTape`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad
from .errors import ConfigError, ScheduleError, TrainingError
from .nn import GradTape, PolicyNet, log_softmax_rows, softmax_rows
from .targets import StateSpaceSpec

MASK = 0


def log_comb(n: np.ndarray, k: np.ndarray) -> np.ndarray:
    """log of the binomial coefficient, elementwise."""
    n = np.asarray(n, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def policy_input_dim(spec: StateSpaceSpec) -> int:
    return spec.d * (spec.C + (1 if spec.has_mask else 0)) + 1


def policy_output_dim(spec: StateSpaceSpec) -> int:
    return spec.d * spec.C


def make_policy_net(spec: StateSpaceSpec, hidden, rng=None) -> PolicyNet:
    dims = [policy_input_dim(spec)] + list(hidden) + [policy_output_dim(spec)]
    return PolicyNet(dims, rng=rng)


def encode_states(x: np.ndarray, spec: StateSpaceSpec, t: np.ndarray) -> np.ndarray:
    """One-hot state encoding per position plus a trailing time scalar."""
    x = np.asarray(x, dtype=np.int64)
    m, d = x.shape
    nch = spec.C + (1 if spec.has_mask else 0)
    onehot = np.zeros((m, d, nch), dtype=np.float64)
    rows = np.repeat(np.arange(m), d)
    cols = np.tile(np.arange(d), m)
    chan = np.where(x.reshape(-1) == MASK, spec.C, x.reshape(-1) - 1)
    onehot[rows, cols, chan] = 1.0
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (m,))
    return np.concatenate([onehot.reshape(m, d * nch), t[:, None]], axis=1)


def _rank_select(eligible: np.ndarray, k: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniform k-subset of eligible positions per row, as a boolean mask."""
    m, d = eligible.shape
    keys = rng.random((m, d))
    keys = np.where(eligible, keys, np.inf)
    order = np.argsort(keys, axis=1)
    ranks = np.empty((m, d), dtype=np.int64)
    rows = np.arange(m)[:, None]
    ranks[rows, order] = np.arange(d)[None, :]
    return ranks < np.asarray(k)[:, None]


def _categorical_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Sample symbol per (row, position) from (M, d, C) probabilities."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:2])
    return (u[..., None] < cdf).argmax(axis=-1) + 1


@dataclass
class MaskingSchedule:
    """Per-step unmask counts: either fixed, or uniform in [k_min, k_max].

    A realised schedule always sums to d, truncating the last step. Both
    directions of one trajectory share the realised schedule.
    """

    counts: Optional[np.ndarray] = None
    k_min: Optional[int] = None
    k_max: Optional[int] = None

    @classmethod
    def fixed(cls, counts) -> "MaskingSchedule":
        counts = np.asarray(counts, dtype=np.int64)
        if counts.min() < 1:
            raise ConfigError("each unmask count must be >= 1")
        return cls(counts=counts)

    @classmethod
    def single_step(cls, d: int) -> "MaskingSchedule":
        return cls.fixed(np.ones(d, dtype=np.int64))

    @classmethod
    def uniform_random(cls, k_min: int, k_max: int) -> "MaskingSchedule":
        if not 1 <= k_min <= k_max:
            raise ConfigError("need 1 <= k_min <= k_max")
        return cls(k_min=k_min, k_max=k_max)

    def realise_batch(self, m: int, d: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Schedules for m trajectories: (N*, m) counts and (m,) step counts."""
        if self.counts is not None:
            if int(self.counts.sum()) != d:
                raise ConfigError(f"schedule sums to {self.counts.sum()}, not d={d}")
            n = len(self.counts)
            return np.tile(self.counts[:, None], (1, m)), np.full(m, n, dtype=np.int64)
        max_n = int(np.ceil(d / self.k_min))
        draws = rng.integers(self.k_min, self.k_max + 1, size=(max_n, m))
        cum = np.cumsum(draws, axis=0)
        over = cum > d
        counts = np.where(over, 0, draws)
        # truncate the step that crosses d so the column sums exactly to d
        short = d - counts.sum(axis=0)
        first_over = over.argmax(axis=0)
        has_over = over.any(axis=0)
        counts[first_over[has_over], np.flatnonzero(has_over)] += short[has_over]
        n_steps = (counts > 0).sum(axis=0)
        top = int(n_steps.max())
        return counts[:top], n_steps


@dataclass
class TrajectoryBatch:
    """M trajectories of a shared rectangular length N (0-count no-op pads)."""

    states: np.ndarray  # (N+1, M, d) int64
    fwd_logp: np.ndarray  # (N, M) per-step forward log-probs
    bwd_logp: np.ndarray  # (N, M) per-step backward log-probs
    schedule: Optional[np.ndarray] = None  # (N, M) unmask counts (masked kernel)
    n_steps: Optional[np.ndarray] = None  # (M,) real step counts
    energy: Optional[np.ndarray] = None  # (M,) terminal energy cache

    @property
    def n_transitions(self) -> int:
        return self.states.shape[0] - 1

    @property
    def batch_size(self) -> int:
        return self.states.shape[1]

    @property
    def x0(self) -> np.ndarray:
        return self.states[0]

    @property
    def xn(self) -> np.ndarray:
        return self.states[-1]

    def fwd_total(self) -> np.ndarray:
        return self.fwd_logp.sum(axis=0)

    def bwd_total(self) -> np.ndarray:
        return self.bwd_logp.sum(axis=0)

    def _steps(self) -> np.ndarray:
        if self.n_steps is not None:
            return self.n_steps
        return np.full(self.batch_size, self.n_transitions, dtype=np.int64)

    def dump(self, path) -> None:
        """Debug dump: one line per (trajectory, step) with both log-probs."""
        with open(path, "w") as fh:
            for m in range(self.batch_size):
                for n in range(self.n_transitions):
                    a, b = self.states[n, m], self.states[n + 1, m]
                    chosen = np.flatnonzero(a != b)
                    fh.write(
                        f"traj={m} step={n} state={' '.join(map(str, b))} "
                        f"chosen={','.join(map(str, chosen))} "
                        f"fwd={self.fwd_logp[n, m]:.12g} bwd={self.bwd_logp[n, m]:.12g}\n"
                    )


def masked_backward_step(
    x: np.ndarray, k: Union[int, np.ndarray], rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """Mask a uniformly chosen k-subset of the non-mask positions.

    Returns the noised states and the per-trajectory log-probability
    ``-log C(|non-mask|, k)``.
    """
    x = np.asarray(x, dtype=np.int64)
    m = x.shape[0]
    k = np.broadcast_to(np.asarray(k, dtype=np.int64), (m,))
    unmasked = x != MASK
    avail = unmasked.sum(axis=1)
    if (k > avail).any():
        raise ScheduleError("fewer unmasked positions than the masking count")
    sel = _rank_select(unmasked, k, rng)
    out = np.where(sel, MASK, x)
    return out, -log_comb(avail, k)


def masked_forward_step(
    x: np.ndarray,
    k: Union[int, np.ndarray],
    net: PolicyNet,
    t: np.ndarray,
    spec: StateSpaceSpec,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """Unmask a uniform k-subset, drawing values from the policy's rows.

    The value distribution conditions only on the current state: all values
    within one step are sampled independently from ``softmax`` rows of the
    policy output.
    """
    x = np.asarray(x, dtype=np.int64)
    m, d = x.shape
    k = np.broadcast_to(np.asarray(k, dtype=np.int64), (m,))
    masked = x == MASK
    avail = masked.sum(axis=1)
    if (k > avail).any():
        raise ScheduleError("fewer masked positions than the unmasking count")
    logits = net.forward(encode_states(x, spec, t)).reshape(m, d, spec.C)
    if not np.isfinite(logits).all():
        raise TrainingError("non-finite policy logits in forward step")
    probs = softmax_rows(logits)
    values = _categorical_rows(probs, rng)
    sel = _rank_select(masked, k, rng)
    out = np.where(sel, values, x)
    logp = -log_comb(avail, k)
    chosen_logp = np.where(sel, np.log(np.take_along_axis(probs, values[..., None] - 1, -1))[..., 0], 0.0)
    return out, logp + chosen_logp.sum(axis=1)


class MaskedKernel:
    """Masked diffusion: delta-at-fully-masked start, combinatorial noising."""

    def __init__(self, spec: StateSpaceSpec, schedule: MaskingSchedule):
        if not spec.has_mask:
            spec = StateSpaceSpec(spec.d, spec.C, has_mask=True)
        self.spec = spec
        self.schedule = schedule

    def retimed(self) -> "MaskedKernel":
        """Same policy queried with one unmask per step (N' = d)."""
        return MaskedKernel(self.spec, MaskingSchedule.single_step(self.spec.d))

    def log_p0(self, x0: np.ndarray) -> np.ndarray:
        return np.zeros(x0.shape[0])

    def rollout_forward(self, net: PolicyNet, m: int, rng: np.random.Generator) -> TrajectoryBatch:
        d = self.spec.d
        counts, n_steps = self.schedule.realise_batch(m, d, rng)
        n = counts.shape[0]
        states = np.empty((n + 1, m, d), dtype=np.int64)
        states[0] = MASK
        fwd = np.zeros((n, m))
        bwd = np.zeros((n, m))
        x = states[0]
        for step in range(n):
            t = np.minimum(step / n_steps, 1.0)
            x, lp = masked_forward_step(x, counts[step], net, t, self.spec, rng)
            states[step + 1] = x
            fwd[step] = lp
            bwd[step] = -log_comb((x != MASK).sum(axis=1), counts[step])
        return TrajectoryBatch(states, fwd, bwd, schedule=counts, n_steps=n_steps)

    def rollout_backward(
        self, xn: np.ndarray, rng: np.random.Generator, net: Optional[PolicyNet] = None
    ) -> TrajectoryBatch:
        """Noise terminal states down to the fully masked start."""
        xn = np.asarray(xn, dtype=np.int64)
        m, d = xn.shape
        counts, n_steps = self.schedule.realise_batch(m, d, rng)
        n = counts.shape[0]
        states = np.empty((n + 1, m, d), dtype=np.int64)
        states[n] = xn
        bwd = np.zeros((n, m))
        x = xn
        for step in range(n - 1, -1, -1):
            x, lp = masked_backward_step(x, counts[step], rng)
            states[step] = x
            bwd[step] = lp
        traj = TrajectoryBatch(states, np.full((n, m), np.nan), bwd, schedule=counts, n_steps=n_steps)
        if net is not None:
            traj.fwd_logp = self.forward_logprob_steps(net, traj)
        return traj

    def _step_gather(self, traj: TrajectoryBatch, step: int):
        """Index bookkeeping shared by the plain and taped evaluators."""
        a = traj.states[step]
        b = traj.states[step + 1]
        newly = (a == MASK) & (b != MASK)
        avail = (a == MASK).sum(axis=1)
        k = newly.sum(axis=1)
        rows, cols = np.nonzero(newly)
        vals = b[rows, cols] - 1
        return a, avail, k, rows, cols, vals

    def forward_logprob_steps(self, net: PolicyNet, traj: TrajectoryBatch) -> np.ndarray:
        """Re-evaluate per-step forward log-probs of a frozen trajectory batch."""
        n, m = traj.n_transitions, traj.batch_size
        d, C = self.spec.d, self.spec.C
        steps = traj._steps()
        out = np.zeros((n, m))
        for step in range(n):
            a, avail, k, rows, cols, vals = self._step_gather(traj, step)
            t = np.minimum(step / steps, 1.0)
            logits = net.forward(encode_states(a, self.spec, t)).reshape(m, d, C)
            logp = log_softmax_rows(logits)
            contrib = np.zeros(m)
            np.add.at(contrib, rows, logp[rows, cols, vals])
            out[step] = -log_comb(avail, k) + contrib
        return out

    def forward_logprob(self, net: PolicyNet, traj: TrajectoryBatch) -> np.ndarray:
        return self.forward_logprob_steps(net, traj).sum(axis=0)

    def taped_forward_logprob(self, tape: GradTape, traj: TrajectoryBatch) -> ad.Var:
        """Path forward log-prob per trajectory as a differentiable (M,) Var."""
        n, m = traj.n_transitions, traj.batch_size
        d, C = self.spec.d, self.spec.C
        steps = traj._steps()
        const = np.zeros(m)
        total: Optional[ad.Var] = None
        for step in range(n):
            a, avail, k, rows, cols, vals = self._step_gather(traj, step)
            const += -log_comb(avail, k)
            if rows.size == 0:
                continue
            t = np.minimum(step / steps, 1.0)
            logits = tape.forward(encode_states(a, self.spec, t))
            logp = ad.log_softmax_rows(ad.reshape(logits, (m * d, C)))
            flat = (rows * d + cols) * C + vals
            part = ad.segment_sum(ad.take_flat(logp, flat), rows, m)
            total = part if total is None else ad.add(total, part)
        if total is None:
            total = ad.Var(np.zeros(m))
        return ad.add(total, const)


@dataclass(frozen=True)
class UniformKernelParams:
    """Per-position resampling kernel: stay w.p. 1-p_flip, else uniform over
    the C-1 other symbols."""

    p_flip: float
    n_steps: int
    C: int

    def __post_init__(self):
        if not 0.0 < self.p_flip < 1.0:
            raise ConfigError("need 0 < p_flip < 1")


def uniform_backward_step(
    x: np.ndarray, params: UniformKernelParams, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.int64)
    m, d = x.shape
    flip = rng.random((m, d)) < params.p_flip
    offs = rng.integers(1, params.C, size=(m, d))
    out = np.where(flip, (x - 1 + offs) % params.C + 1, x)
    return out, uniform_logprob(out, x, params)


def uniform_logprob(a: np.ndarray, b: np.ndarray, params: UniformKernelParams) -> np.ndarray:
    """Reference-kernel log-prob of moving between two states (symmetric)."""
    diff = (np.asarray(a) != np.asarray(b)).sum(axis=-1)
    d = a.shape[-1]
    stay = np.log1p(-params.p_flip)
    move = np.log(params.p_flip / (params.C - 1))
    return (d - diff) * stay + diff * move


def uniform_forward_step(
    x: np.ndarray,
    net: PolicyNet,
    t: np.ndarray,
    spec: StateSpaceSpec,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-position categorical transition from the policy's softmax rows."""
    x = np.asarray(x, dtype=np.int64)
    m, d = x.shape
    logits = net.forward(encode_states(x, spec, t)).reshape(m, d, spec.C)
    if not np.isfinite(logits).all():
        raise TrainingError("non-finite policy logits in forward step")
    probs = softmax_rows(logits)
    out = _categorical_rows(probs, rng)
    lp = np.log(np.take_along_axis(probs, out[..., None] - 1, -1))[..., 0].sum(axis=1)
    return out, lp


class UniformKernel:
    """Uniform diffusion over S: uniform start, resampling reference kernel.

    The same machinery serves both the sampler setting (fixed backward
    reference, learned forward) and bridges (either direction can be a net).
    """

    def __init__(self, spec: StateSpaceSpec, params: UniformKernelParams):
        if spec.has_mask:
            raise ConfigError("uniform diffusion stays inside S (no mask token)")
        if params.C != spec.C:
            raise ConfigError("kernel C differs from state space C")
        self.spec = spec
        self.params = params

    @property
    def n(self) -> int:
        return self.params.n_steps

    def log_p0(self, x0: np.ndarray) -> np.ndarray:
        return np.full(x0.shape[0], -self.spec.d * np.log(self.spec.C))

    def sample_p0(self, m: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(1, self.spec.C + 1, size=(m, self.spec.d))

    def rollout_forward(
        self, net: PolicyNet, m: int, rng: np.random.Generator, x0: Optional[np.ndarray] = None
    ) -> TrajectoryBatch:
        n, d = self.n, self.spec.d
        states = np.empty((n + 1, m, d), dtype=np.int64)
        states[0] = self.sample_p0(m, rng) if x0 is None else np.asarray(x0, dtype=np.int64)
        fwd = np.zeros((n, m))
        bwd = np.zeros((n, m))
        x = states[0]
        for step in range(n):
            x, lp = uniform_forward_step(x, net, step / n, self.spec, rng)
            states[step + 1] = x
            fwd[step] = lp
            bwd[step] = uniform_logprob(states[step], x, self.params)
        return TrajectoryBatch(states, fwd, bwd)

    def rollout_reference_forward(
        self, x0: np.ndarray, rng: np.random.Generator
    ) -> TrajectoryBatch:
        """Forward rollout under the reference kernel itself (IPF start)."""
        x0 = np.asarray(x0, dtype=np.int64)
        n, (m, d) = self.n, x0.shape
        states = np.empty((n + 1, m, d), dtype=np.int64)
        states[0] = x0
        fwd = np.zeros((n, m))
        bwd = np.zeros((n, m))
        x = x0
        for step in range(n):
            x, lp = uniform_backward_step(x, self.params, rng)
            states[step + 1] = x
            fwd[step] = lp
            bwd[step] = lp  # the reference kernel is symmetric
        return TrajectoryBatch(states, fwd, bwd)

    def rollout_backward(
        self,
        xn: np.ndarray,
        rng: np.random.Generator,
        net: Optional[PolicyNet] = None,
        bwd_net: Optional[PolicyNet] = None,
    ) -> TrajectoryBatch:
        """Noise terminal states with the reference kernel (or a learned one)."""
        xn = np.asarray(xn, dtype=np.int64)
        n, (m, d) = self.n, xn.shape
        states = np.empty((n + 1, m, d), dtype=np.int64)
        states[n] = xn
        bwd = np.zeros((n, m))
        x = xn
        for step in range(n - 1, -1, -1):
            if bwd_net is None:
                x, lp = uniform_backward_step(x, self.params, rng)
            else:
                x, lp = uniform_forward_step(x, bwd_net, (step + 1) / n, self.spec, rng)
            states[step] = x
            bwd[step] = lp
        traj = TrajectoryBatch(states, np.full((n, m), np.nan), bwd)
        if net is not None:
            traj.fwd_logp = self.net_logprob_steps(net, traj, "fwd")
        return traj

    def _transition(self, traj: TrajectoryBatch, step: int, direction: str):
        if direction == "fwd":
            return traj.states[step], traj.states[step + 1], step / traj.n_transitions
        return traj.states[step + 1], traj.states[step], (step + 1) / traj.n_transitions

    def net_logprob_steps(
        self, net: PolicyNet, traj: TrajectoryBatch, direction: str
    ) -> np.ndarray:
        """Per-step log-probs of a trajectory under a net kernel."""
        n, m = traj.n_transitions, traj.batch_size
        d, C = self.spec.d, self.spec.C
        out = np.zeros((n, m))
        for step in range(n):
            src, dst, t = self._transition(traj, step, direction)
            logits = net.forward(encode_states(src, self.spec, t)).reshape(m, d, C)
            logp = log_softmax_rows(logits)
            out[step] = np.take_along_axis(logp, dst[..., None] - 1, -1)[..., 0].sum(axis=1)
        return out

    def net_logprob(self, net: PolicyNet, traj: TrajectoryBatch, direction: str = "fwd") -> np.ndarray:
        return self.net_logprob_steps(net, traj, direction).sum(axis=0)

    def reference_logprob_steps(self, traj: TrajectoryBatch) -> np.ndarray:
        n = traj.n_transitions
        return np.stack(
            [uniform_logprob(traj.states[i], traj.states[i + 1], self.params) for i in range(n)]
        )

    def taped_net_logprob(self, tape: GradTape, traj: TrajectoryBatch, direction: str = "fwd") -> ad.Var:
        n, m = traj.n_transitions, traj.batch_size
        d, C = self.spec.d, self.spec.C
        total: Optional[ad.Var] = None
        for step in range(n):
            src, dst, t = self._transition(traj, step, direction)
            logits = tape.forward(encode_states(src, self.spec, t))
            logp = ad.log_softmax_rows(ad.reshape(logits, (m * d, C)))
            rows = np.repeat(np.arange(m), d)
            flat = np.arange(m * d) * C + (dst.reshape(-1) - 1)
            part = ad.segment_sum(ad.take_flat(logp, flat), rows, m)
            total = part if total is None else ad.add(total, part)
        return total if total is not None else ad.Var(np.zeros(m))

    # sampler-style aliases used by the shared training loop
    def forward_logprob(self, net: PolicyNet, traj: TrajectoryBatch) -> np.ndarray:
        return self.net_logprob(net, traj, "fwd")

    def forward_logprob_steps(self, net: PolicyNet, traj: TrajectoryBatch) -> np.ndarray:
        return self.net_logprob_steps(net, traj, "fwd")

    def taped_forward_logprob(self, tape: GradTape, traj: TrajectoryBatch) -> ad.Var:
        return self.taped_net_logprob(tape, traj, "fwd")

    def retimed(self) -> "UniformKernel":
        return self
