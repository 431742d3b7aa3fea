"""Target energies: toroidal lattice spin models, Gray-code discretised
continuous densities, and an exact enumeration oracle for small spaces.

All energy functions are vectorised over a batch axis: ``energy`` maps an
``(M, d)`` integer array of states (symbols in ``1..C``) to ``(M,)`` float64
energies. Probabilities are always ``p(x) ∝ exp(-E(x))``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .errors import CapacityError, ConfigError, DomainError

GMM_MAGIC = b"DDGMM001"
GMM40_SEED = 20250809  # fixed seed used to generate the shipped means files


@dataclass(frozen=True)
class StateSpaceSpec:
    """Sequence length, vocabulary size and whether a mask token exists."""

    d: int
    C: int
    has_mask: bool = False

    def __post_init__(self):
        if self.d < 1 or self.C < 2:
            raise ConfigError(f"need d >= 1 and C >= 2, got d={self.d}, C={self.C}")


class TargetEnergy:
    """Pointwise-queryable energy over a discrete state space."""

    def __init__(self, spec: StateSpaceSpec, name: str):
        self.spec = spec
        self.name = name

    def energy(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self.spec.d:
            raise DomainError(f"state length {x.shape[-1]} != d={self.spec.d}")
        if x.min() < 1 or x.max() > self.spec.C:
            raise DomainError("state symbol outside {1..C}")
        return x


class CallableTarget(TargetEnergy):
    """Wrap an arbitrary batch energy function (used by tests and fixtures)."""

    def __init__(self, spec: StateSpaceSpec, fn: Callable[[np.ndarray], np.ndarray], name: str):
        super().__init__(spec, name)
        self._fn = fn

    def energy(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self._fn(self._check(x)), dtype=np.float64)


# ---------------------------------------------------------------------------
# Lattice spin models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatticeParams:
    """Toroidal L x L lattice with q spin values and agreement coefficient J.

    The Ising model is the special case q=2, J=1/2.
    """

    L: int
    q: int
    J: float
    beta: float

    def __post_init__(self):
        if self.L < 2 or self.q < 2 or self.beta <= 0:
            raise ConfigError(f"bad lattice params {self!r}")

    @classmethod
    def ising(cls, L: int, beta: float) -> "LatticeParams":
        return cls(L=L, q=2, J=0.5, beta=beta)

    @classmethod
    def potts(cls, L: int, q: int, beta: float, J: float = 1.0) -> "LatticeParams":
        return cls(L=L, q=q, J=J, beta=beta)


def potts_energy(x: np.ndarray, params: LatticeParams) -> np.ndarray:
    """beta * H(x) with H = -J * (number of agreeing toroidal neighbour pairs).

    Each of the 2*L^2 unordered edges (right and down neighbours, periodic)
    is counted once. Accepts a single lattice (flat or L x L) or a batch.
    """
    L = params.L
    x = np.asarray(x)
    single = x.shape in ((L * L,), (L, L))
    if x.size % (L * L):
        raise DomainError(f"state not an L*L lattice (L={L})")
    grid = x.reshape(-1, L, L)
    if grid.min() < 1 or grid.max() > params.q:
        raise DomainError("spin value outside {1..q}")
    agree = (grid == np.roll(grid, -1, axis=1)).sum(axis=(1, 2))
    agree += (grid == np.roll(grid, -1, axis=2)).sum(axis=(1, 2))
    out = params.beta * (-params.J) * agree.astype(np.float64)
    return out[0] if single else out


class LatticeTarget(TargetEnergy):
    def __init__(self, params: LatticeParams, name: Optional[str] = None):
        spec = StateSpaceSpec(d=params.L * params.L, C=params.q)
        super().__init__(spec, name or f"potts-L{params.L}-q{params.q}-b{params.beta}")
        self.params = params

    def energy(self, x: np.ndarray) -> np.ndarray:
        return potts_energy(self._check(x), self.params)


# ---------------------------------------------------------------------------
# Gray codes and discretised continuous densities
# ---------------------------------------------------------------------------


def gray_encode(k: int, b: int) -> np.ndarray:
    """Gray code of integer k as b bits, most significant first."""
    if not 0 <= k < (1 << b):
        raise DomainError(f"k={k} out of range for b={b} bits")
    g = k ^ (k >> 1)
    return np.array([(g >> (b - 1 - i)) & 1 for i in range(b)], dtype=np.int64)


def gray_decode(bits: np.ndarray) -> int:
    bits = np.asarray(bits)
    if bits.min() < 0 or bits.max() > 1:
        raise DomainError("gray bits must be 0/1")
    binary = np.cumsum(bits) % 2  # prefix xor
    b = bits.shape[0]
    return int((binary << np.arange(b - 1, -1, -1)).sum())


def gray_decode_batch(bits: np.ndarray) -> np.ndarray:
    """Decode (..., b) bit arrays to integers along the last axis."""
    bits = np.asarray(bits, dtype=np.int64)
    binary = np.cumsum(bits, axis=-1) % 2
    b = bits.shape[-1]
    weights = 1 << np.arange(b - 1, -1, -1, dtype=np.int64)
    return (binary * weights).sum(axis=-1)


@dataclass(frozen=True)
class GrayCodeConfig:
    """D continuous dimensions, b bits each, truncated to [-R, R]."""

    D: int
    b: int
    R: float

    @property
    def d(self) -> int:
        return self.D * self.b

    @property
    def bin_width(self) -> float:
        return 2.0 * self.R / (1 << self.b)

    def decode(self, bits: np.ndarray) -> np.ndarray:
        """Map (M, D*b) bit arrays to the (M, D) bin-centre coordinates."""
        bits = np.asarray(bits)
        ks = gray_decode_batch(bits.reshape(-1, self.D, self.b))
        return ((ks + 0.5) / (1 << self.b)) * 2.0 * self.R - self.R

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Quantise (M, D) real points into (M, D*b) Gray bit arrays."""
        x = np.asarray(x, dtype=np.float64)
        nbins = 1 << self.b
        ks = np.clip(((x + self.R) / (2 * self.R) * nbins).astype(np.int64), 0, nbins - 1)
        g = ks ^ (ks >> 1)
        shifts = np.arange(self.b - 1, -1, -1, dtype=np.int64)
        bits = (g[..., None] >> shifts) & 1
        return bits.reshape(x.shape[0], self.D * self.b)


def discretised_energy(
    bits: np.ndarray, cont_energy: Callable[[np.ndarray], np.ndarray], cfg: GrayCodeConfig
) -> np.ndarray:
    """Energy of a Gray-coded bin: continuous energy at the bin centre, with a
    -D*log(bin width) volume correction."""
    centres = cfg.decode(bits)
    return np.asarray(cont_energy(centres), dtype=np.float64) - cfg.D * np.log(cfg.bin_width)


class GrayCodeTarget(TargetEnergy):
    """Discrete target over symbols {1,2} encoding bits {0,1}."""

    def __init__(
        self,
        cfg: GrayCodeConfig,
        cont_energy: Callable[[np.ndarray], np.ndarray],
        name: str,
    ):
        super().__init__(StateSpaceSpec(d=cfg.d, C=2), name)
        self.cfg = cfg
        self.cont_energy = cont_energy

    def energy(self, x: np.ndarray) -> np.ndarray:
        bits = self._check(x) - 1
        return discretised_energy(bits, self.cont_energy, self.cfg)

    def decode(self, x: np.ndarray) -> np.ndarray:
        """Bin-centre real coordinates of symbol states (for L2 metrics)."""
        return self.cfg.decode(self._check(x) - 1)


# -- continuous energies ----------------------------------------------------


def doublewell_energy(x1: np.ndarray) -> np.ndarray:
    x1 = np.asarray(x1, dtype=np.float64)
    return x1**4 - 6.0 * x1**2 - 0.5 * x1


def manywell_energy(x: np.ndarray) -> np.ndarray:
    """Product of D/2 double wells (even dims) and D/2 standard Gaussians."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % 2:
        raise ConfigError("ManyWell needs an even number of dimensions")
    a = x[..., 0::2]
    b = x[..., 1::2]
    return doublewell_energy(a).sum(axis=-1) + 0.5 * (b**2).sum(axis=-1)


def rotated_manywell_energy(x: np.ndarray) -> np.ndarray:
    """ManyWell with each pair of coordinates rotated by pi/4."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % 2:
        raise ConfigError("ManyWell needs an even number of dimensions")
    a = x[..., 0::2]
    b = x[..., 1::2]
    u = (a + b) / np.sqrt(2.0)
    v = (-a + b) / np.sqrt(2.0)
    return doublewell_energy(u).sum(axis=-1) + 0.5 * (v**2).sum(axis=-1)


def gmm_energy(x: np.ndarray, means: np.ndarray) -> np.ndarray:
    """Negative log density of a uniform, identity-covariance Gaussian mixture."""
    x = np.asarray(x, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    n, D = means.shape
    sq = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=-1)
    log_comp = -0.5 * sq - 0.5 * D * np.log(2 * np.pi)
    return -(logsumexp(log_comp, axis=1) - np.log(n))


def generate_gmm40_means(D: int, seed: int = GMM40_SEED) -> np.ndarray:
    """The 40 mixture means: one draw from U[-47, 47]^D at a fixed seed."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-47.0, 47.0, size=(40, D))


def write_means_file(path, means: np.ndarray) -> None:
    means = np.asarray(means, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(GMM_MAGIC)
        fh.write(struct.pack("<II", means.shape[0], means.shape[1]))
        fh.write(means.astype("<f8").tobytes())


def read_means_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(len(GMM_MAGIC))
        if magic != GMM_MAGIC:
            raise ConfigError(f"bad means file magic {magic!r}")
        n, D = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(n * D * 8), dtype="<f8")
        return data.reshape(n, D).astype(np.float64)


def load_gmm40_means(D: int) -> np.ndarray:
    """Load the shipped 40GMM means for D dimensions."""
    name = f"gmm40_d{D}.bin"
    ref = resources.files("ddsampler").joinpath("data").joinpath(name)
    with resources.as_file(ref) as path:
        return read_means_file(path)


def gmm40_target(D: int, b: int = 8, R: float = 50.0) -> GrayCodeTarget:
    means = load_gmm40_means(D)
    cfg = GrayCodeConfig(D=D, b=b, R=R)
    return GrayCodeTarget(cfg, lambda x: gmm_energy(x, means), f"gmm40-{D}d")


def manywell_target(D: int, b: int = 8, R: float = 4.0, rotated: bool = True) -> GrayCodeTarget:
    cfg = GrayCodeConfig(D=D, b=b, R=R)
    fn = rotated_manywell_energy if rotated else manywell_energy
    tag = "rotated-manywell" if rotated else "manywell"
    return GrayCodeTarget(cfg, fn, f"{tag}-{D}d")


# ---------------------------------------------------------------------------
# Exact enumeration
# ---------------------------------------------------------------------------

ENUMERATION_LIMIT = 1 << 20


class EnumerationOracle:
    """Exact log Z and the full normalised probability table of a target.

    Only constructible when C^d <= 2^20. States are indexed in mixed radix
    with the first position most significant.
    """

    def __init__(self, target: TargetEnergy, chunk: int = 1 << 16):
        d, C = target.spec.d, target.spec.C
        n_states = C**d
        if n_states > ENUMERATION_LIMIT:
            raise CapacityError(f"C^d = {n_states} exceeds {ENUMERATION_LIMIT}")
        self.target = target
        self.n_states = n_states
        self._powers = C ** np.arange(d - 1, -1, -1, dtype=np.int64)
        idx = np.arange(n_states, dtype=np.int64)
        self.states = ((idx[:, None] // self._powers[None, :]) % C + 1).astype(np.int16)
        energies = np.empty(n_states, dtype=np.float64)
        for lo in range(0, n_states, chunk):
            hi = min(lo + chunk, n_states)
            energies[lo:hi] = target.energy(self.states[lo:hi].astype(np.int64))
        self.energies = energies
        self.log_z = float(logsumexp(-energies))
        self.log_probs = -energies - self.log_z
        self.probs = np.exp(self.log_probs)
        self._cdf = np.cumsum(self.probs)

    def state_index(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.int64)
        if x.ndim == 1:
            x = x[None, :]
        return ((x - 1) * self._powers[None, :]).sum(axis=1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """n exact i.i.d. draws as an (n, d) symbol array."""
        u = rng.random(n)
        idx = np.searchsorted(self._cdf, u, side="right")
        idx = np.minimum(idx, self.n_states - 1)
        return self.states[idx].astype(np.int64)

    def empirical_distribution(self, samples: np.ndarray) -> np.ndarray:
        idx = self.state_index(samples)
        counts = np.bincount(idx, minlength=self.n_states)
        return counts / counts.sum()

    def expectation(self, values: np.ndarray) -> float:
        """Exact expectation of a per-state value array aligned with states."""
        return float(np.dot(self.probs, values))


def enumerate_target(target: TargetEnergy) -> EnumerationOracle:
    return EnumerationOracle(target)
