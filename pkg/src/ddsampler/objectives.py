"""Second-moment path-space losses (trajectory balance and log-variance)
and trajectory importance weights.

The per-trajectory log-ratio is

    l = log p0(X_0) + sum log p_fwd  -  ( -E(X_N) + sum log p_bwd ),

with -E standing in for the unnormalised log target mass; the missing log Z
is absorbed by the free scalar. The loss is the second moment of (l - c):
for LV, c is the batch mean; for TB, the learnable scalar is stored as a
log-partition estimate ``logz`` with c = -logz, so that the trained scalar
converges to +log Z. Off-policy batches are treated as fixed data, so
gradients flow only through the forward log-probabilities (no score term).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .diffusion import TrajectoryBatch
from .errors import ConfigError, ContractError
from .nn import GradTape, PolicyNet


@dataclass
class LossConfig:
    kind: str = "tb"  # "tb" | "lv"
    logz_lr: float = 1e-1  # learning rate of the TB scalar

    def __post_init__(self):
        if self.kind not in ("tb", "lv"):
            raise ConfigError(f"unknown loss kind {self.kind!r}")


def log_ratio(
    traj: TrajectoryBatch, energies: np.ndarray, log_p0: np.ndarray
) -> np.ndarray:
    """Per-trajectory log of forward over backward path mass."""
    if not np.isfinite(traj.fwd_logp).all():
        raise ContractError("trajectory batch is missing forward log-probs")
    if not np.isfinite(traj.bwd_logp).all():
        raise ContractError("trajectory batch is missing backward log-probs")
    energies = np.asarray(energies, dtype=np.float64)
    return log_p0 + traj.fwd_total() - (-energies + traj.bwd_total())


def importance_log_weights(
    traj: TrajectoryBatch, energies: np.ndarray, log_p0: np.ndarray
) -> np.ndarray:
    """log w of each trajectory (the negated log-ratio), kept in log domain."""
    return -log_ratio(traj, energies, log_p0)


def second_moment_loss(log_ratios: np.ndarray, c: float) -> float:
    """The generic second-moment divergence mean((l - c)^2) at a given c."""
    log_ratios = np.asarray(log_ratios, dtype=np.float64)
    return float(((log_ratios - c) ** 2).mean())


def second_moment_dc(log_ratios: np.ndarray, c: float) -> float:
    """d/dc of the generic second-moment loss."""
    log_ratios = np.asarray(log_ratios, dtype=np.float64)
    return float(-2.0 * (log_ratios - c).mean())


def batch_loss_values(log_ratios: np.ndarray, cfg: LossConfig, logz: float = 0.0) -> float:
    """Loss value only (no gradients); LV ignores the supplied scalar."""
    log_ratios = np.asarray(log_ratios, dtype=np.float64)
    if cfg.kind == "lv":
        if log_ratios.size < 2:
            raise ConfigError("log-variance needs a batch of at least 2")
        return second_moment_loss(log_ratios, log_ratios.mean())
    return second_moment_loss(log_ratios, -logz)


@dataclass
class LossResult:
    loss: float
    theta_grad: np.ndarray
    logz_grad: Optional[float]
    log_ratios: np.ndarray


def loss_and_grad(
    net: PolicyNet,
    kernel,
    traj: TrajectoryBatch,
    energies: np.ndarray,
    cfg: LossConfig,
    logz: float = 0.0,
) -> LossResult:
    """Loss and parameter gradients on a frozen trajectory batch.

    ``kernel`` must provide ``taped_forward_logprob`` and ``log_p0``; the
    backward path probabilities and energies enter as constants.
    """
    m = traj.batch_size
    if cfg.kind == "lv" and m < 2:
        raise ConfigError("log-variance needs a batch of at least 2")
    energies = np.asarray(energies, dtype=np.float64)
    const = kernel.log_p0(traj.x0) + energies - traj.bwd_total()

    tape = GradTape(net)
    fwd = kernel.taped_forward_logprob(tape, traj)
    ell = ad.add(fwd, const)

    if cfg.kind == "tb":
        z_var = ad.Var(np.asarray(float(logz)), needs_grad=True)
        loss = ad.vmean(ad.square(ad.add(ell, z_var)))
        theta_grad = tape.gradient(loss)
        logz_grad = float(z_var.grad) if z_var.grad is not None else 0.0
    else:
        c_batch = float(ell.data.mean())
        loss = ad.vmean(ad.square(ad.sub(ell, np.asarray(c_batch))))
        theta_grad = tape.gradient(loss)
        logz_grad = None
    return LossResult(float(loss.data), theta_grad, logz_grad, ell.data.copy())
