"""Replay buffers: the importance-weighted buffer B and the MCMC buffer.

Both are bounded FIFO multisets over terminal states; B additionally stores
log importance weights (weights span hundreds of nats on large targets, so
only the log is ever kept; priorities are formed with a max-shifted softmax
at sampling time).
"""

from __future__ import annotations

import struct
from typing import Optional, Tuple

import numpy as np

from .errors import BufferStateError, ConfigError

BUFFER_MAGIC = b"DDSBUF01"


class ReplayBuffer:
    """Bounded FIFO of (terminal state, log weight, insertion epoch)."""

    def __init__(self, capacity: int, d: int):
        if capacity < 1:
            raise ConfigError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.d = d
        self._states = np.zeros((capacity, d), dtype=np.int64)
        self._log_w = np.zeros(capacity, dtype=np.float64)
        self._epoch = np.zeros(capacity, dtype=np.int64)
        self._head = 0  # next write slot
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def insert_batch(self, states: np.ndarray, log_w: np.ndarray, epoch: int = 0) -> None:
        states = np.asarray(states, dtype=np.int64)
        log_w = np.asarray(log_w, dtype=np.float64)
        if states.ndim != 2 or states.shape[1] != self.d:
            raise ConfigError(f"states must be (n, {self.d})")
        if not np.isfinite(log_w).all():
            raise ConfigError("log weights must be finite")
        for x, lw in zip(states, log_w):
            self._states[self._head] = x
            self._log_w[self._head] = lw
            self._epoch[self._head] = epoch
            self._head = (self._head + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        """Slot indices in insertion order (oldest first)."""
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self.capacity) + self._head) % self.capacity

    def entries(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = self._order()
        return self._states[idx].copy(), self._log_w[idx].copy(), self._epoch[idx].copy()

    def priorities(self) -> np.ndarray:
        """Normalised sampling probabilities (insertion order): softmax over
        raw weights, computed with a max shift each call."""
        if self._size == 0:
            raise BufferStateError("buffer is empty")
        lw = self._log_w[self._order()]
        shifted = np.exp(lw - lw.max())
        return shifted / shifted.sum()

    def sample_prioritised(self, m: int, rng: np.random.Generator) -> np.ndarray:
        """m draws with replacement, probability proportional to exp(log_w)."""
        p = self.priorities()
        idx = rng.choice(p.size, size=m, replace=True, p=p)
        pool = self._states[self._order()]
        return pool[idx].copy()

    def save(self, path) -> None:
        states, log_w, epoch = self.entries()
        with open(path, "wb") as fh:
            fh.write(BUFFER_MAGIC)
            fh.write(struct.pack("<QQQ", self.capacity, self.d, len(self)))
            fh.write(states.astype("<i8").tobytes())
            fh.write(log_w.astype("<f8").tobytes())
            fh.write(epoch.astype("<i8").tobytes())

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        with open(path, "rb") as fh:
            if fh.read(len(BUFFER_MAGIC)) != BUFFER_MAGIC:
                raise ConfigError("bad buffer snapshot magic")
            cap, d, n = struct.unpack("<QQQ", fh.read(24))
            buf = cls(cap, d)
            states = np.frombuffer(fh.read(n * d * 8), dtype="<i8").reshape(n, d)
            log_w = np.frombuffer(fh.read(n * 8), dtype="<f8")
            epoch = np.frombuffer(fh.read(n * 8), dtype="<i8")
            for x, lw, ep in zip(states, log_w, epoch):
                buf.insert_batch(x[None, :], np.array([lw]), int(ep))
            return buf


class McmcBuffer:
    """Bounded FIFO of bare states refined by exploration chains."""

    def __init__(self, capacity: int, d: int):
        if capacity < 1:
            raise ConfigError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.d = d
        self._states = np.zeros((capacity, d), dtype=np.int64)
        self._head = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def insert_batch(self, states: np.ndarray) -> None:
        states = np.asarray(states, dtype=np.int64)
        if states.ndim != 2 or states.shape[1] != self.d:
            raise ConfigError(f"states must be (n, {self.d})")
        for x in states:
            self._states[self._head] = x
            self._head = (self._head + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self.capacity) + self._head) % self.capacity

    def sample_uniform(self, m: int, rng: np.random.Generator) -> np.ndarray:
        if self._size == 0:
            raise BufferStateError("MCMC buffer is empty")
        order = self._order()
        idx = rng.integers(0, self._size, size=m)
        return self._states[order[idx]].copy()

    def entries(self) -> np.ndarray:
        return self._states[self._order()].copy()


def assemble_offpolicy_batch(
    buffer: ReplayBuffer,
    mcmc_buffer: Optional[McmcBuffer],
    m: int,
    r: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """M' = min(ceil(r*M), |B_mcmc|) uniform MCMC-buffer draws, the rest
    prioritised from B."""
    if len(buffer) == 0:
        raise BufferStateError("replay buffer is empty")
    n_mcmc = len(mcmc_buffer) if mcmc_buffer is not None else 0
    m_prime = min(int(np.ceil(r * m)), n_mcmc)
    parts = []
    if m_prime > 0:
        parts.append(mcmc_buffer.sample_uniform(m_prime, rng))
    if m - m_prime > 0:
        parts.append(buffer.sample_prioritised(m - m_prime, rng))
    return np.concatenate(parts, axis=0)
