"""Energies the reference server can serve.

Fixture energies mirror the sampler toolkit's built-in targets but are
implemented here independently; the only shared contract is the wire
protocol. The toy posterior composes tabular pieces:

    E(z) = -log p_latent(z) - log p(y_obs | f(z))

with a deterministic decode table f and positive probability tables, so the
full outsourced-sampling pattern is testable hermetically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np


def sum_symbols(states: np.ndarray) -> np.ndarray:
    return states.sum(axis=1).astype(np.float64)


def lattice_energy(states: np.ndarray, L: int, J: float, beta: float) -> np.ndarray:
    grids = states.reshape(-1, L, L)
    agree = (grids == np.roll(grids, -1, axis=1)).sum(axis=(1, 2))
    agree += (grids == np.roll(grids, -1, axis=2)).sum(axis=(1, 2))
    return beta * (-J) * agree.astype(np.float64)


def make_fixture(name: str, d: int, C: int, params: dict) -> Callable[[np.ndarray], np.ndarray]:
    if name == "sum-symbols":
        return sum_symbols
    if name == "ising":
        L = int(params.get("L", round(d**0.5)))
        if L * L != d or C != 2:
            raise ValueError(f"ising fixture needs d = L*L and C = 2, got d={d}, C={C}")
        return lambda s: lattice_energy(s, L, 0.5, float(params.get("beta", 1.0)))
    if name == "potts":
        L = int(params.get("L", round(d**0.5)))
        if L * L != d:
            raise ValueError(f"potts fixture needs d = L*L, got d={d}")
        return lambda s: lattice_energy(
            s, L, float(params.get("J", 1.0)), float(params.get("beta", 1.0))
        )
    raise ValueError(f"unknown fixture {name!r}")


@dataclass
class ToyPosterior:
    """Tabular latent prior, deterministic decoder and likelihood table."""

    d: int
    C: int
    log_p_latent: np.ndarray  # (C^d,)
    decode: np.ndarray  # (C^d,) class index per state
    log_likelihood: np.ndarray  # (n_y, n_classes)
    observed_y: int

    @classmethod
    def from_file(cls, path) -> "ToyPosterior":
        with open(path) as fh:
            cfg = json.load(fh)
        d, C = int(cfg["d"]), int(cfg["C"])
        p_latent = np.asarray(cfg["p_latent"], dtype=np.float64)
        decode = np.asarray(cfg["decode"], dtype=np.int64)
        lik = np.asarray(cfg["likelihood"], dtype=np.float64)
        n_states = C**d
        if p_latent.shape != (n_states,) or decode.shape != (n_states,):
            raise ValueError("p_latent and decode must have C^d entries")
        if (p_latent <= 0).any() or (lik <= 0).any():
            raise ValueError("probability tables must be strictly positive")
        if decode.min() < 0 or decode.max() >= lik.shape[1]:
            raise ValueError("decode table indexes a missing class")
        return cls(
            d=d,
            C=C,
            log_p_latent=np.log(p_latent / p_latent.sum()),
            decode=decode,
            log_likelihood=np.log(lik),
            observed_y=int(cfg["observed_y"]),
        )

    def state_index(self, states: np.ndarray) -> np.ndarray:
        powers = self.C ** np.arange(self.d - 1, -1, -1, dtype=np.int64)
        return ((states - 1) * powers[None, :]).sum(axis=1)

    def energy(self, states: np.ndarray) -> np.ndarray:
        idx = self.state_index(states)
        classes = self.decode[idx]
        return -(self.log_p_latent[idx] + self.log_likelihood[self.observed_y, classes])

    def posterior_table(self) -> np.ndarray:
        """Exact normalised posterior over all states (for verification)."""
        log_post = self.log_p_latent + self.log_likelihood[self.observed_y, self.decode]
        w = np.exp(log_post - log_post.max())
        return w / w.sum()
