"""Discrete diffusion samplers with off-policy training and data-to-energy
bridges, verified against exact enumeration at desk scale."""

from .targets import (
    EnumerationOracle,
    GrayCodeConfig,
    GrayCodeTarget,
    LatticeParams,
    LatticeTarget,
    StateSpaceSpec,
    TargetEnergy,
)
from .diffusion import (
    MaskedKernel,
    MaskingSchedule,
    TrajectoryBatch,
    UniformKernel,
    UniformKernelParams,
    make_policy_net,
)
from .nn import AdamW, GradTape, PolicyNet, softmax_rows
from .objectives import LossConfig, importance_log_weights, log_ratio, loss_and_grad
from .replay import McmcBuffer, ReplayBuffer, assemble_offpolicy_batch
from .training import RunState, TrainConfig, anneal_beta, run, train_epoch

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "EnumerationOracle",
    "GradTape",
    "GrayCodeConfig",
    "GrayCodeTarget",
    "LatticeParams",
    "LatticeTarget",
    "LossConfig",
    "MaskedKernel",
    "MaskingSchedule",
    "McmcBuffer",
    "PolicyNet",
    "ReplayBuffer",
    "RunState",
    "StateSpaceSpec",
    "TargetEnergy",
    "TrainConfig",
    "TrajectoryBatch",
    "UniformKernel",
    "UniformKernelParams",
    "anneal_beta",
    "assemble_offpolicy_batch",
    "importance_log_weights",
    "log_ratio",
    "loss_and_grad",
    "make_policy_net",
    "run",
    "softmax_rows",
    "train_epoch",
]
