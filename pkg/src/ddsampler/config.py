"""Experiment configuration: JSON config files, validation, presets, and
builders that turn config blocks into targets, kernels and train configs.

Field names mirror the hyperparameter tables (batch_size M, buffer_size,
off_to_on_ratio R, mcmc_sample_ratio r, mcmc_interval I, mcmc_steps L).
Exactly one of the ``train``, ``bridge`` or ``mcmc_baseline`` blocks must be
present.
"""

from __future__ import annotations

import copy
import json
from fractions import Fraction
from typing import Callable, List, Optional

import numpy as np

from .bridge import BridgeConfig
from .diffusion import MaskedKernel, MaskingSchedule, UniformKernel, UniformKernelParams
from .errors import ConfigError
from .objectives import LossConfig
from .targets import (
    CallableTarget,
    GrayCodeConfig,
    GrayCodeTarget,
    LatticeParams,
    LatticeTarget,
    StateSpaceSpec,
    TargetEnergy,
    gmm_energy,
    gmm40_target,
    manywell_target,
)
from .training import TrainConfig

RUN_BLOCKS = ("train", "bridge", "mcmc_baseline")


def load_config(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def dump_config(cfg: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def validate_config(cfg: dict) -> List[str]:
    """Return every violation found (empty list when valid)."""
    errors: List[str] = []
    if not isinstance(cfg, dict):
        return ["config must be a JSON object"]
    if "target" not in cfg:
        errors.append("missing required block: target")
    elif not isinstance(cfg["target"], dict) or "name" not in cfg["target"]:
        errors.append("target block must be an object with a 'name'")
    blocks = [b for b in RUN_BLOCKS if b in cfg]
    if len(blocks) != 1:
        errors.append(f"exactly one of {RUN_BLOCKS} required, found {blocks or 'none'}")
    if "train" in cfg or "mcmc_baseline" in cfg:
        if "kernel" not in cfg and "train" in cfg:
            errors.append("missing required block: kernel")
    if "kernel" in cfg:
        k = cfg["kernel"]
        if k.get("type") not in ("masked", "uniform"):
            errors.append("kernel.type must be 'masked' or 'uniform'")
        elif k["type"] == "uniform" and not (0 < k.get("p_flip", 0) < 1):
            errors.append("kernel.p_flip must lie in (0, 1)")
    t = cfg.get("train", {})
    if t:
        if t.get("loss", "tb") not in ("tb", "lv"):
            errors.append("train.loss must be 'tb' or 'lv'")
        for field in ("epochs", "batch_size"):
            if not isinstance(t.get(field), int) or t.get(field, 0) < 1:
                errors.append(f"train.{field} must be a positive integer")
        r = t.get("mcmc_sample_ratio", 0.2)
        if not 0 <= r <= 1:
            errors.append("train.mcmc_sample_ratio must lie in [0, 1]")
        if t.get("strategy", "buffer+mcmc") not in ("on-policy", "buffer", "buffer+mcmc"):
            errors.append("train.strategy must be on-policy | buffer | buffer+mcmc")
    b = cfg.get("bridge", {})
    if b:
        if not isinstance(b.get("n_outer"), int) or b.get("n_outer", -1) < 0:
            errors.append("bridge.n_outer must be a nonnegative integer")
        if b.get("k_traj", 8) < 2:
            errors.append("bridge.k_traj must be >= 2")
        if "p0" not in b:
            errors.append("bridge.p0 block is required")
    if "seed" in cfg and not isinstance(cfg["seed"], int):
        errors.append("seed must be an integer")
    return errors


def require_valid(cfg: dict) -> None:
    errors = validate_config(cfg)
    if errors:
        raise ConfigError("invalid config:\n  - " + "\n  - ".join(errors))


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def build_target(block: dict) -> TargetEnergy:
    name = block["name"]
    if name == "ising":
        return LatticeTarget(LatticeParams.ising(block["L"], block["beta"]))
    if name == "potts":
        return LatticeTarget(
            LatticeParams.potts(block["L"], block["q"], block["beta"], block.get("J", 1.0))
        )
    if name == "gmm40":
        return gmm40_target(block["D"], b=block.get("bits", 8), R=block.get("R", 50.0))
    if name == "manywell":
        return manywell_target(
            block["D"], b=block.get("bits", 8), R=block.get("R", 4.0),
            rotated=block.get("rotated", True),
        )
    if name == "gmm":
        means = np.asarray(block["means"], dtype=np.float64)
        cfg = GrayCodeConfig(D=means.shape[1], b=block.get("bits", 8), R=block["R"])
        return GrayCodeTarget(cfg, lambda x: gmm_energy(x, means), block.get("label", "gmm"))
    if name == "sum-symbols":
        spec = StateSpaceSpec(d=block["d"], C=block["C"])
        return CallableTarget(spec, lambda x: x.sum(axis=1).astype(np.float64), "sum-symbols")
    if name == "two-mode":
        # bimodal energy over binary strings: scale * min Hamming distance to
        # the all-ones and all-twos states
        d = block["d"]
        scale = block.get("scale", 0.6)
        spec = StateSpaceSpec(d=d, C=2)

        def two_mode(x):
            h1 = (x != 1).sum(axis=1)
            h2 = (x != 2).sum(axis=1)
            return scale * np.minimum(h1, h2).astype(np.float64)

        return CallableTarget(spec, two_mode, f"two-mode-d{d}")
    if name == "remote":
        raise ConfigError("remote targets are built from the energy_rpc block")
    raise ConfigError(f"unknown target name {name!r}")


def build_kernel(block: dict, spec: StateSpaceSpec):
    if block["type"] == "masked":
        mspec = StateSpaceSpec(spec.d, spec.C, has_mask=True)
        k_min = block.get("k_min", 1)
        k_max = block.get("k_max", k_min)
        if k_min == k_max == 1:
            sched = MaskingSchedule.single_step(spec.d)
        else:
            sched = MaskingSchedule.uniform_random(k_min, k_max)
        return MaskedKernel(mspec, sched)
    if block["type"] == "uniform":
        params = UniformKernelParams(
            p_flip=block["p_flip"], n_steps=block["n_steps"], C=spec.C
        )
        return UniformKernel(StateSpaceSpec(spec.d, spec.C), params)
    raise ConfigError(f"unknown kernel type {block['type']!r}")


def build_train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    strategy = t.get("strategy", "buffer+mcmc")
    return TrainConfig(
        n_epochs=t["epochs"],
        batch_m=t["batch_size"],
        buffer_capacity=t.get("buffer_size", 12800),
        loss=LossConfig(t.get("loss", "tb"), logz_lr=t.get("logz_learning_rate", 0.1)),
        lr=t.get("learning_rate", 1e-3),
        weight_decay=t.get("weight_decay", 0.0),
        off_policy=strategy != "on-policy",
        ratio_r=Fraction(str(t.get("off_to_on_ratio", "2"))),
        mcmc_explore=strategy == "buffer+mcmc",
        mcmc_interval=t.get("mcmc_interval", 500),
        mcmc_steps=t.get("mcmc_steps", 100),
        mcmc_ratio=t.get("mcmc_sample_ratio", 0.2),
        mcmc_kind=t.get("mcmc_kernel", "mh"),
        mcmc_h=t.get("mcmc_h", 1),
        mcmc_stay_prob=t.get("mcmc_stay_prob", 0.9),
        annealing=t.get("annealing", True),
        seed=cfg.get("seed", 0),
        eval_every=t.get("eval_every", 0),
        eval_samples=t.get("eval_samples", 1024),
    )


def build_bridge_config(cfg: dict) -> BridgeConfig:
    b = cfg["bridge"]
    return BridgeConfig(
        n_outer=b["n_outer"],
        k_traj=b.get("k_traj", 8),
        groups_per_batch=b.get("groups_per_batch", 16),
        backward_steps=b.get("backward_steps", 300),
        forward_steps=b.get("forward_steps", 300),
        mle_batch=b.get("mle_batch", 64),
        lr=b.get("learning_rate", 1e-3),
        lr_decay=b.get("lr_decay", 1.0),
        weight_decay=b.get("weight_decay", 0.0),
        converge_window=b.get("converge_window", 50),
        converge_rel=b.get("converge_rel", 1e-4),
        off_policy=b.get("off_policy", False),
        buffer_capacity=b.get("buffer_size", 4096),
        mcmc_steps=b.get("mcmc_steps", 20),
        mcmc_kind=b.get("mcmc_kernel", "mh"),
        mcmc_h=b.get("mcmc_h", 1),
        mcmc_stay_prob=b.get("mcmc_stay_prob", 0.9),
        seed=cfg.get("seed", 0),
        hidden=tuple(cfg.get("net", {}).get("hidden", [128, 128])),
    )


def build_p0_sampler(block: dict, spec: StateSpaceSpec, gray: Optional[GrayCodeConfig]):
    """Data-side distribution of a bridge, given by samples."""
    name = block["name"]
    if name == "delta":
        state = np.asarray(block["state"], dtype=np.int64)
        if state.shape != (spec.d,):
            raise ConfigError("delta state length != d")
        return lambda m, rng: np.tile(state, (m, 1))
    if name == "uniform":
        return lambda m, rng: rng.integers(1, spec.C + 1, size=(m, spec.d))
    if name == "gmm-samples":
        if gray is None:
            raise ConfigError("gmm-samples p0 needs a Gray-coded state space")
        means = np.asarray(block["means"], dtype=np.float64)
        sigma = block.get("sigma", 1.0)

        def sample(m, rng):
            comp = rng.integers(0, means.shape[0], size=m)
            pts = means[comp] + sigma * rng.normal(size=(m, means.shape[1]))
            return gray.encode(pts) + 1

        return sample
    raise ConfigError(f"unknown p0 block {name!r}")


# ---------------------------------------------------------------------------
# Presets: one per reference configuration plus the desk-scale runs
# ---------------------------------------------------------------------------


def _lattice_preset(name: str, target: dict, hidden: list) -> dict:
    return {
        "seed": 0,
        "target": target,
        "kernel": {"type": "masked", "k_min": 4, "k_max": 4},
        "net": {"hidden": hidden},
        "train": {
            "loss": "tb",
            "strategy": "buffer+mcmc",
            "epochs": 20000,
            "batch_size": 128,
            "buffer_size": 12800,
            "off_to_on_ratio": "2",
            "mcmc_sample_ratio": 0.2,
            "mcmc_interval": 500,
            "mcmc_steps": 100,
            "mcmc_kernel": "sw",
            "learning_rate": 1e-3,
            "annealing": True,
            "eval_every": 1000,
            "eval_samples": 2048,
        },
        "eval": {"m_eval": 2048, "sinkhorn_eps": 1e-3, "sinkhorn_metric": "hamming"},
    }


def _synthetic_preset(target: dict, n_layers: int, k: int = 1) -> dict:
    cfg = _lattice_preset("", target, [256] * n_layers)
    cfg["kernel"] = {"type": "masked", "k_min": k, "k_max": k}
    cfg["train"]["mcmc_kernel"] = "mh"
    cfg["train"]["mcmc_h"] = 5
    cfg["eval"]["sinkhorn_metric"] = "l2"
    return cfg


A5_GMM_MEANS = [[-4.0, -4.0], [-4.0, 4.0], [4.0, -4.0], [4.0, 4.0]]


def presets() -> dict:
    p = {
        "ising16-b0.4407": _lattice_preset(
            "", {"name": "ising", "L": 16, "beta": 0.4407}, [256, 256]
        ),
        "ising16-b0.6": _lattice_preset("", {"name": "ising", "L": 16, "beta": 0.6}, [256, 256]),
        "ising16-b1.2": _lattice_preset("", {"name": "ising", "L": 16, "beta": 1.2}, [256, 256]),
        "potts16-q3-b1.005": _lattice_preset(
            "", {"name": "potts", "L": 16, "q": 3, "beta": 1.005}, [256, 256]
        ),
        "potts16-q3-b1.2": _lattice_preset(
            "", {"name": "potts", "L": 16, "q": 3, "beta": 1.2}, [256, 256]
        ),
        "gmm40-2d": _synthetic_preset({"name": "gmm40", "D": 2}, 2),
        "gmm40-4d": _synthetic_preset({"name": "gmm40", "D": 4}, 4),
        "manywell-4d": _synthetic_preset({"name": "manywell", "D": 4}, 2),
        "manywell-10d": _synthetic_preset({"name": "manywell", "D": 10}, 4, k=4),
    }
    p["outsourced-mlp"] = {
        "seed": 0,
        "target": {"name": "sum-symbols", "d": 16, "C": 8},
        "kernel": {"type": "masked", "k_min": 1, "k_max": 1},
        "net": {"hidden": [256, 256]},
        "energy_rpc": {"cmd": None},
        "train": {
            "loss": "lv",
            "strategy": "buffer+mcmc",
            "epochs": 20000,
            "batch_size": 256,
            "buffer_size": 25600,
            "off_to_on_ratio": "2",
            "mcmc_sample_ratio": 0.5,
            "mcmc_interval": 10,
            "mcmc_steps": 201,
            "mcmc_kernel": "categorical",
            "mcmc_stay_prob": 0.9,
            "learning_rate": 1e-3,
            "annealing": True,
            "eval_every": 1000,
            "eval_samples": 2048,
        },
        "eval": {"m_eval": 2048, "sinkhorn_eps": 1e-3, "sinkhorn_metric": "hamming"},
    }
    # desk-scale configurations used by the acceptance suite
    a2 = _lattice_preset("", {"name": "ising", "L": 3, "beta": 0.6}, [128, 128])
    a2["kernel"] = {"type": "masked", "k_min": 1, "k_max": 1}
    a2["train"].update(
        {
            "epochs": 3000,
            "batch_size": 64,
            "buffer_size": 6400,
            "mcmc_interval": 100,
            "mcmc_steps": 30,
            "eval_every": 500,
            "eval_samples": 2048,
        }
    )
    p["ising3-b0.6-a2"] = a2
    a5 = {
        "seed": 0,
        "target": {"name": "gmm", "means": A5_GMM_MEANS, "bits": 4, "R": 8.0, "label": "gmm4-2d"},
        "kernel": {"type": "masked", "k_min": 1, "k_max": 1},
        "net": {"hidden": [128, 128]},
        "train": {
            "loss": "tb",
            "strategy": "buffer+mcmc",
            "epochs": 3000,
            "batch_size": 64,
            "buffer_size": 6400,
            "off_to_on_ratio": "2",
            "mcmc_sample_ratio": 0.2,
            "mcmc_interval": 100,
            "mcmc_steps": 30,
            "mcmc_kernel": "mh",
            "mcmc_h": 2,
            "learning_rate": 1e-3,
            "annealing": True,
            "eval_every": 500,
            "eval_samples": 2048,
        },
        "eval": {"m_eval": 2048, "sinkhorn_eps": 1e-3, "sinkhorn_metric": "l2"},
    }
    p["gmm4-2d-a5"] = a5
    p["bridge-d4-a7"] = {
        "seed": 0,
        "target": {"name": "two-mode", "d": 4, "scale": 0.6},
        "kernel": {"type": "uniform", "p_flip": 0.1, "n_steps": 24},
        "net": {"hidden": [128, 128]},
        "bridge": {
            "n_outer": 6,
            "k_traj": 8,
            "groups_per_batch": 32,
            "backward_steps": 400,
            "forward_steps": 600,
            "mle_batch": 64,
            "learning_rate": 2e-3,
            "lr_decay": 0.75,
            "converge_window": 100,
            "converge_rel": 1e-5,
            "off_policy": False,
            "p0": {"name": "delta", "state": [1, 1, 1, 1]},
        },
        "eval": {"m_eval": 2048},
    }
    p["3gmm-4gmm-16bit"] = {
        "seed": 0,
        "target": {
            "name": "gmm",
            "means": [[-3.0, -3.0], [-3.0, 3.0], [3.0, -3.0], [3.0, 3.0]],
            "bits": 8,
            "R": 6.0,
            "label": "4gmm",
        },
        "kernel": {"type": "uniform", "p_flip": 0.15, "n_steps": 20},
        "net": {"hidden": [192, 192]},
        "bridge": {
            "n_outer": 4,
            "k_traj": 8,
            "groups_per_batch": 16,
            "backward_steps": 400,
            "forward_steps": 400,
            "mle_batch": 64,
            "learning_rate": 1e-3,
            "off_policy": True,
            "buffer_size": 4096,
            "mcmc_steps": 20,
            "mcmc_kernel": "mh",
            "mcmc_h": 2,
            "p0": {
                "name": "gmm-samples",
                "means": [[0.0, 4.0], [-4.0, -2.0], [4.0, -2.0]],
                "sigma": 0.6,
            },
        },
        "eval": {"m_eval": 2048, "sinkhorn_metric": "l2"},
    }
    p["mh-baseline-ising3"] = {
        "seed": 0,
        "target": {"name": "ising", "L": 3, "beta": 0.6},
        "kernel": {"type": "masked", "k_min": 1, "k_max": 1},
        "mcmc_baseline": {
            "kernel": "mh",
            "H": 1,
            "chains": 128,
            "burn_in": 2000,
            "samples_per_chain": 128,
            "thinning": 200,
        },
        "eval": {"m_eval": 2048},
    }
    return copy.deepcopy(p)


def get_preset(name: str) -> dict:
    all_presets = presets()
    if name not in all_presets:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(all_presets)}")
    return all_presets[name]
