"""MCMC kernels: H-Hamming-ball Metropolis-Hastings, Swendsen-Wang cluster
moves for lattice spin models, and the independent categorical kernel.

All kernels are vectorised across parallel chains: a state batch is an
(M, d) int array, and one call advances every chain by one step. Proposals
for MH and the categorical kernel are symmetric by construction, so the
acceptance ratio carries no Hastings correction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ConfigError
from .targets import LatticeParams, TargetEnergy


@dataclass(frozen=True)
class MhConfig:
    """Proposal = H sequential 1-Hamming moves; baseline chain settings
    default to the reference configuration (2000 burn-in, thin 200)."""

    H: int = 1
    steps: int = 25600
    burn_in: int = 2000
    thinning: int = 200

    def __post_init__(self):
        if self.H < 1:
            raise ConfigError("H must be >= 1")


@dataclass(frozen=True)
class SwConfig:
    params: LatticeParams
    steps: int = 100


@dataclass(frozen=True)
class CategoricalMcmcConfig:
    stay_prob: float = 0.9
    steps: int = 201

    def __post_init__(self):
        if not 0.0 < self.stay_prob < 1.0:
            raise ConfigError("stay probability must lie in (0, 1)")


def _accept(e_cur: np.ndarray, e_prop: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.log(rng.random(e_cur.shape[0])) < (e_cur - e_prop)


def mh_hamming_step(
    x: np.ndarray, target: TargetEnergy, H: int, rng: np.random.Generator
) -> np.ndarray:
    """One Metropolis step with an H-fold sequential 1-Hamming proposal."""
    x = np.asarray(x, dtype=np.int64)
    m, d = x.shape
    C = target.spec.C
    y = x.copy()
    for _ in range(H):
        pos = rng.integers(0, d, size=m)
        offs = rng.integers(1, C, size=m)
        rows = np.arange(m)
        y[rows, pos] = (y[rows, pos] - 1 + offs) % C + 1
    acc = _accept(target.energy(x), target.energy(y), rng)
    return np.where(acc[:, None], y, x)


def categorical_mcmc_step(
    x: np.ndarray, target: TargetEnergy, stay_prob: float, rng: np.random.Generator
) -> np.ndarray:
    """Independent per-entry resampling proposal with MH acceptance."""
    x = np.asarray(x, dtype=np.int64)
    m, d = x.shape
    C = target.spec.C
    move = rng.random((m, d)) < (1.0 - stay_prob)
    offs = rng.integers(1, C, size=(m, d))
    y = np.where(move, (x - 1 + offs) % C + 1, x)
    acc = _accept(target.energy(x), target.energy(y), rng)
    return np.where(acc[:, None], y, x)


def swendsen_wang_step(
    x: np.ndarray, params: LatticeParams, rng: np.random.Generator
) -> np.ndarray:
    """One Swendsen-Wang cluster move on a batch of toroidal lattices.

    Bonds between agreeing neighbours open with probability 1 - exp(-beta*J)
    (J is the per-edge agreement coefficient of the energy); connected
    components are relabelled uniformly over {1..q}.
    """
    x = np.asarray(x, dtype=np.int64)
    L, q = params.L, params.q
    grids = x.reshape(-1, L, L)
    m = grids.shape[0]
    p_bond = 1.0 - np.exp(-params.beta * params.J)

    site = np.arange(L * L).reshape(L, L)
    right = np.roll(site, -1, axis=1).reshape(-1)
    down = np.roll(site, -1, axis=0).reshape(-1)
    base = site.reshape(-1)

    agree_r = grids == np.roll(grids, -1, axis=2)
    agree_d = grids == np.roll(grids, -1, axis=1)
    open_r = agree_r.reshape(m, -1) & (rng.random((m, L * L)) < p_bond)
    open_d = agree_d.reshape(m, -1) & (rng.random((m, L * L)) < p_bond)

    chain_off = (np.arange(m) * L * L)[:, None]
    rows = np.concatenate(
        [(chain_off + base[None, :])[open_r], (chain_off + base[None, :])[open_d]]
    )
    cols = np.concatenate(
        [(chain_off + right[None, :])[open_r], (chain_off + down[None, :])[open_d]]
    )
    n_nodes = m * L * L
    graph = coo_matrix(
        (np.ones(rows.size, dtype=np.int8), (rows, cols)), shape=(n_nodes, n_nodes)
    )
    n_comp, labels = connected_components(graph, directed=False)
    new_spin = rng.integers(1, q + 1, size=n_comp)
    return new_spin[labels].reshape(x.shape)


def make_step_fn(
    kind: str, target: TargetEnergy, *, H: int = 1, stay_prob: float = 0.9,
    lattice: LatticeParams | None = None,
) -> Callable[[np.ndarray, np.random.Generator], np.ndarray]:
    """Bind a kernel choice to a target as a (states, rng) -> states step."""
    if kind == "mh":
        return lambda s, rng: mh_hamming_step(s, target, H, rng)
    if kind == "categorical":
        return lambda s, rng: categorical_mcmc_step(s, target, stay_prob, rng)
    if kind == "sw":
        if lattice is None:
            raise ConfigError("Swendsen-Wang requires a lattice target")
        return lambda s, rng: swendsen_wang_step(s, lattice, rng)
    raise ConfigError(f"unknown MCMC kernel {kind!r}")


def refine_batch(
    states: np.ndarray,
    step_fn: Callable[[np.ndarray, np.random.Generator], np.ndarray],
    n_steps: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Advance M parallel chains n_steps and return only the final states."""
    x = np.asarray(states, dtype=np.int64)
    for _ in range(n_steps):
        x = step_fn(x, rng)
    return x


def run_chains(
    init: np.ndarray,
    step_fn: Callable[[np.ndarray, np.random.Generator], np.ndarray],
    burn_in: int,
    n_samples_per_chain: int,
    thinning: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Baseline sampler: burn in, then collect one sample every ``thinning``
    steps from each chain; returns (chains * samples, d)."""
    x = np.asarray(init, dtype=np.int64)
    for _ in range(burn_in):
        x = step_fn(x, rng)
    out = []
    for _ in range(n_samples_per_chain):
        for _ in range(max(thinning, 1)):
            x = step_fn(x, rng)
        out.append(x.copy())
    if not out:
        return x.copy()
    return np.concatenate(out, axis=0)
