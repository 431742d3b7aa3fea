"""Evaluation metrics: ELBO/EUBO bounds on log Z, entropic OT (Sinkhorn),
MMD, lattice magnetisation and 2-point correlation errors, and total
variation against enumeration oracles.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError
from .nn import PolicyNet
from .objectives import importance_log_weights
from .targets import EnumerationOracle, LatticeParams, TargetEnergy


@dataclass
class EvalConfig:
    m_eval: int = 2048
    sinkhorn_eps: float = 1e-3
    sinkhorn_metric: str = "hamming"  # "hamming" | "l2"
    sinkhorn_max_iter: int = 1000  # tiny-eps EOT is near-LP; result is flagged
    sinkhorn_tol: float = 1e-9
    rollout_chunk: int = 16384

    def __post_init__(self):
        if self.m_eval < 2 or self.sinkhorn_eps <= 0:
            raise ConfigError("need m_eval >= 2 and eps > 0")


@dataclass
class SampleSet:
    """States plus, for Gray-coded targets, their decoded real coordinates."""

    states: np.ndarray
    decoded: Optional[np.ndarray] = None


def _mean_se(values: np.ndarray) -> Tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    se = values.std(ddof=1) / np.sqrt(values.size) if values.size > 1 else 0.0
    return float(values.mean()), float(se)


def elbo(
    net: PolicyNet,
    kernel,
    target: TargetEnergy,
    m_eval: int,
    rng: np.random.Generator,
    chunk: int = 16384,
) -> Tuple[float, float]:
    """Mean log importance weight over fresh forward rollouts (lower bound)."""
    logs = []
    left = m_eval
    while left > 0:
        m = min(left, chunk)
        traj = kernel.rollout_forward(net, m, rng)
        e = target.energy(traj.xn)
        logs.append(importance_log_weights(traj, e, kernel.log_p0(traj.x0)))
        left -= m
    return _mean_se(np.concatenate(logs))


def forward_terminal_samples(
    net: PolicyNet, kernel, m: int, rng: np.random.Generator, chunk: int = 16384
) -> np.ndarray:
    out = []
    left = m
    while left > 0:
        b = min(left, chunk)
        out.append(kernel.rollout_forward(net, b, rng).xn)
        left -= b
    return np.concatenate(out, axis=0)


def eubo(
    net: PolicyNet,
    kernel,
    target: TargetEnergy,
    true_samples: np.ndarray,
    rng: np.random.Generator,
    chunk: int = 16384,
) -> Tuple[float, float]:
    """Mean log importance weight over noising rollouts from true samples
    (upper bound). Requires samples of the target."""
    true_samples = np.asarray(true_samples, dtype=np.int64)
    if true_samples.ndim != 2 or true_samples.shape[0] < 2:
        raise ConfigError("EUBO requires a batch of true samples")
    logs = []
    for lo in range(0, true_samples.shape[0], chunk):
        xn = true_samples[lo : lo + chunk]
        traj = kernel.rollout_backward(xn, rng, net=net)
        e = target.energy(xn)
        logs.append(importance_log_weights(traj, e, kernel.log_p0(traj.x0)))
    return _mean_se(np.concatenate(logs))


# ---------------------------------------------------------------------------
# Sample-set discrepancies
# ---------------------------------------------------------------------------


def hamming_cost(a: np.ndarray, b: np.ndarray, C: int) -> np.ndarray:
    """Pairwise Hamming distances via one-hot inner products."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    d = a.shape[1]
    same = np.zeros((a.shape[0], b.shape[0]))
    for c in range(1, C + 1):
        same += (a == c).astype(np.float64) @ (b == c).astype(np.float64).T
    return d - same


def l2_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(sq, 0.0))


@dataclass
class SinkhornResult:
    value: float
    converged: bool
    iterations: int
    marginal_violation: float


def sinkhorn_cost_matrix(
    cost: np.ndarray,
    eps: float,
    max_iter: int = 5000,
    tol: float = 1e-9,
    weights_a: Optional[np.ndarray] = None,
    weights_b: Optional[np.ndarray] = None,
) -> SinkhornResult:
    """Entropy-regularised OT in the log domain (uniform marginals unless
    weights are given).

    The potentials are warmed up with an epsilon-scaling schedule (halving
    from the cost scale down to the target eps), which leaves the fixed
    point untouched but speeds small-eps problems up considerably.
    Returns the transport cost <P, C> at the regularised optimum (no
    entropic term, no debiasing). Non-convergence is flagged, not raised.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    a = np.full(n, 1.0 / n) if weights_a is None else np.asarray(weights_a, dtype=np.float64)
    b = np.full(m, 1.0 / m) if weights_b is None else np.asarray(weights_b, dtype=np.float64)
    log_a = np.log(a)
    log_b = np.log(b)
    f = np.zeros(n)
    g = np.zeros(m)

    def sweep(e):
        nonlocal f, g
        f = -e * logsumexp((g[None, :] - cost) / e + log_b[None, :], axis=1)
        g = -e * logsumexp((f[:, None] - cost) / e + log_a[:, None], axis=0)

    it = 0
    spread = float(cost.max() - cost.min())
    e_warm = spread / 2.0
    while e_warm > eps and it < max_iter // 2:
        for _ in range(3):
            sweep(e_warm)
            it += 1
        e_warm /= 2.0

    viol = np.inf
    ran_target = False
    while it < max_iter or not ran_target:
        # at least one full sweep at the target eps: afterwards the coupling's
        # column marginals are exact, keeping the reported value finite
        it += 1
        ran_target = True
        sweep(eps)
        if it % 5 == 0 or it >= max_iter:
            log_p = (f[:, None] + g[None, :] - cost) / eps + log_a[:, None] + log_b[None, :]
            viol = np.abs(np.exp(logsumexp(log_p, axis=1)) - a).sum()
            if viol < tol:
                break
    log_p = (f[:, None] + g[None, :] - cost) / eps + log_a[:, None] + log_b[None, :]
    value = float(np.sum(np.exp(log_p) * cost))
    return SinkhornResult(value, viol < tol, it, float(viol))


def _collapse(states: np.ndarray, decoded: Optional[np.ndarray]):
    """Unique sample points with their empirical weights.

    A multiset of samples and its weighted unique support define the same
    transport problem; duplicate atoms only slow the iteration down.
    """
    uniq, counts = np.unique(states, axis=0, return_counts=True)
    w = counts / counts.sum()
    if decoded is None:
        return uniq, None, w
    dec_map = {}
    for row, d in zip(states, decoded):
        dec_map.setdefault(row.tobytes(), d)
    return uniq, np.stack([dec_map[row.tobytes()] for row in uniq]), w


def sinkhorn(a: SampleSet, b: SampleSet, cfg: EvalConfig, C: int = 2) -> SinkhornResult:
    if a.states.shape[0] == 0 or b.states.shape[0] == 0:
        raise ConfigError("sinkhorn needs nonempty sample sets")
    ua, da, wa = _collapse(a.states, a.decoded)
    ub, db, wb = _collapse(b.states, b.decoded)
    if cfg.sinkhorn_metric == "l2":
        if da is None or db is None:
            raise ConfigError("L2 sinkhorn needs decoded coordinates")
        cost = l2_cost(da, db)
    else:
        cost = hamming_cost(ua, ub, C)
    return sinkhorn_cost_matrix(
        cost, cfg.sinkhorn_eps, cfg.sinkhorn_max_iter, cfg.sinkhorn_tol,
        weights_a=wa, weights_b=wb,
    )


def mmd(a: np.ndarray, b: np.ndarray) -> float:
    """Gaussian-kernel MMD (biased V-statistic) with the median heuristic
    bandwidth over the pooled set; returns the square root."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    pooled = np.concatenate([a, b], axis=0)
    dist = l2_cost(pooled, pooled)
    iu = np.triu_indices(pooled.shape[0], k=1)
    sigma = float(np.median(dist[iu])) if iu[0].size else 0.0
    if sigma == 0.0:
        sigma = 1.0  # all-identical pooled points; flagged fallback
    n, m = a.shape[0], b.shape[0]
    k = np.exp(-(dist**2) / (2.0 * sigma * sigma))
    kaa = k[:n, :n].mean()
    kbb = k[n:, n:].mean()
    kab = k[:n, n:].mean()
    return float(np.sqrt(max(kaa + kbb - 2.0 * kab, 0.0)))


# ---------------------------------------------------------------------------
# Lattice statistics
# ---------------------------------------------------------------------------


def _ising_spins(samples: np.ndarray, L: int) -> np.ndarray:
    """Map internal symbols {1,2} to spins {-1,+1} on (B, L, L)."""
    s = np.asarray(samples, dtype=np.int64).reshape(-1, L, L)
    return (2 * s - 3).astype(np.float64)


def _site_magnetisation(samples: np.ndarray, params: LatticeParams, kind: str) -> np.ndarray:
    L, q = params.L, params.q
    if kind == "ising":
        return _ising_spins(samples, L).mean(axis=0)
    s = np.asarray(samples, dtype=np.int64).reshape(-1, L, L)
    counts = np.stack([(s == c).mean(axis=0) for c in range(1, q + 1)])
    return (q * counts.max(axis=0) - 1.0) / (q - 1.0)


def magnetisation_error(
    samples: np.ndarray, true_samples: np.ndarray, params: LatticeParams, kind: str = "ising"
) -> float:
    """(1/2L) sum_k |dM_row(k)| + |dM_col(k)| between two sample batches."""
    if kind not in ("ising", "potts"):
        raise ConfigError(f"unknown model kind {kind!r}")
    L = params.L
    m_a = _site_magnetisation(samples, params, kind)
    m_b = _site_magnetisation(true_samples, params, kind)
    row = np.abs(m_a.mean(axis=1) - m_b.mean(axis=1)).sum()
    col = np.abs(m_a.mean(axis=0) - m_b.mean(axis=0)).sum()
    return float((row + col) / (2.0 * L))


def _pair_correlations(samples: np.ndarray, params: LatticeParams, kind: str) -> Tuple[np.ndarray, np.ndarray]:
    """C_row(r), C_col(r) for r = 0..L-1 with toroidal offsets."""
    L, q = params.L, params.q
    if kind == "ising":
        s = _ising_spins(samples, L)
        mean = s.mean(axis=0)
        c_row = np.empty(L)
        c_col = np.empty(L)
        for r in range(L):
            pair_row = (s * np.roll(s, -r, axis=1)).mean(axis=0) - mean * np.roll(mean, -r, axis=0)
            pair_col = (s * np.roll(s, -r, axis=2)).mean(axis=0) - mean * np.roll(mean, -r, axis=1)
            c_row[r] = pair_row.mean()
            c_col[r] = pair_col.mean()
        return c_row, c_col
    s = np.asarray(samples, dtype=np.int64).reshape(-1, L, L)
    c_row = np.empty(L)
    c_col = np.empty(L)
    for r in range(L):
        c_row[r] = ((s == np.roll(s, -r, axis=1)).mean(axis=0) - 1.0 / q).mean()
        c_col[r] = ((s == np.roll(s, -r, axis=2)).mean(axis=0) - 1.0 / q).mean()
    return c_row, c_col


def correlation_error(
    samples: np.ndarray, true_samples: np.ndarray, params: LatticeParams, kind: str = "ising"
) -> float:
    if kind not in ("ising", "potts"):
        raise ConfigError(f"unknown model kind {kind!r}")
    L = params.L
    ra, ca = _pair_correlations(samples, params, kind)
    rb, cb = _pair_correlations(true_samples, params, kind)
    return float((np.abs(ra - rb).sum() + np.abs(ca - cb).sum()) / (2.0 * L))


def tv_to_oracle(samples: np.ndarray, oracle: EnumerationOracle) -> float:
    """Half L1 distance between the empirical distribution and the table."""
    emp = oracle.empirical_distribution(samples)
    return float(0.5 * np.abs(emp - oracle.probs).sum())


def tv_between(p: np.ndarray, q: np.ndarray) -> float:
    return float(0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum())
