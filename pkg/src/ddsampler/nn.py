"""Dense policy networks, their gradient tape, and the AdamW optimiser.

Networks are plain MLPs over float64 numpy arrays: tanh hidden layers and a
linear output layer. Parameters live in the net as row-major matrices; the
flatten/unflatten pair is a bijection onto a single parameter vector, which
is also the checkpoint and optimiser layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, TrainingError

CHECKPOINT_MAGIC = b"DDSCKPT1"


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; rows sum to 1."""
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class PolicyNet:
    """MLP with tanh hidden activations and a linear last layer.

    ``layer_dims`` is (input, hidden..., output). By default the final layer
    is zero-initialised so a fresh policy emits uniform categorical rows.
    """

    def __init__(
        self,
        layer_dims: Sequence[int],
        rng: Optional[np.random.Generator] = None,
        zero_last: bool = True,
    ):
        if len(layer_dims) < 2 or any(n < 1 for n in layer_dims):
            raise ConfigError(f"bad layer_dims {layer_dims!r}")
        self.layer_dims = tuple(int(n) for n in layer_dims)
        rng = rng or np.random.default_rng(0)
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        n_layers = len(self.layer_dims) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_dims, self.layer_dims[1:])):
            if zero_last and i == n_layers - 1:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
            self.weights.append(np.ascontiguousarray(w, dtype=np.float64))
            self.biases.append(np.zeros(fan_out, dtype=np.float64))

    @property
    def param_count(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the net on a vector or a batch (rows are samples)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[-1] != self.in_dim:
            raise ConfigError(
                f"input width {h.shape[-1]} != layer_dims[0] {self.in_dim}"
            )
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i != last:
                h = np.tanh(h)
        return h[0] if single else h

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.reshape(-1))
            parts.append(b)
        return np.concatenate(parts)

    def unflatten(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.param_count,):
            raise ConfigError(f"parameter vector length {vec.size} != {self.param_count}")
        off = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = vec[off : off + w.size].reshape(w.shape)
            off += w.size
            b[...] = vec[off : off + b.size]
            off += b.size

    def clone(self) -> "PolicyNet":
        other = PolicyNet(self.layer_dims, zero_last=True)
        other.unflatten(self.flatten())
        return other

    # -- checkpoint file: magic, u32 count + dims, u64 param_count, f64 LE --
    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(self.layer_dims)))
            fh.write(struct.pack(f"<{len(self.layer_dims)}I", *self.layer_dims))
            fh.write(struct.pack("<Q", self.param_count))
            fh.write(self.flatten().astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "PolicyNet":
        with open(path, "rb") as fh:
            magic = fh.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise ConfigError(f"bad checkpoint magic {magic!r}")
            (n_dims,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{n_dims}I", fh.read(4 * n_dims))
            (count,) = struct.unpack("<Q", fh.read(8))
            net = cls(dims)
            if count != net.param_count:
                raise ConfigError("checkpoint param_count mismatch")
            vec = np.frombuffer(fh.read(count * 8), dtype="<f8").astype(np.float64)
            net.unflatten(vec)
            return net


class GradTape:
    """Records taped forward passes of one net and extracts flat gradients.

    Parameter Vars share storage with the net, so the tape sees current
    values; parameters never touched by the loss get gradient exactly 0.
    """

    def __init__(self, net: PolicyNet):
        self.net = net
        self.params: List[ad.Var] = []
        for w, b in zip(net.weights, net.biases):
            self.params.append(ad.Var(w, needs_grad=True))
            self.params.append(ad.Var(b, needs_grad=True))

    def forward(self, x) -> ad.Var:
        """Taped analogue of ``net.forward`` on a batch (2-D input)."""
        h = x if isinstance(x, ad.Var) else ad.Var(np.asarray(x, dtype=np.float64))
        if h.data.ndim != 2 or h.data.shape[1] != self.net.in_dim:
            raise ConfigError("taped forward expects a (batch, in_dim) array")
        n_layers = len(self.net.weights)
        for i in range(n_layers):
            h = ad.add(ad.matmul(h, self.params[2 * i]), self.params[2 * i + 1])
            if i != n_layers - 1:
                h = ad.tanh(h)
        return h

    def gradient(self, loss: ad.Var) -> np.ndarray:
        """Run backward and return d(loss)/d(params) in flatten order."""
        ad.backward(loss)
        parts = []
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            parts.append(g.reshape(-1))
        return np.concatenate(parts)


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam over a flat parameter vector."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: Optional[np.ndarray] = field(default=None, repr=False)
    v: Optional[np.ndarray] = field(default=None, repr=False)

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        params = np.asarray(params, dtype=np.float64)
        grads = np.asarray(grads, dtype=np.float64)
        if params.shape != grads.shape:
            raise ConfigError("params/grads length mismatch")
        bad = np.flatnonzero(~np.isfinite(grads))
        if bad.size:
            raise TrainingError(
                f"non-finite gradient at parameter index {bad[0]}", index=int(bad[0])
            )
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.step_count += 1
        t = self.step_count
        self.m = self.beta1 * self.m + (1 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1 - self.beta2) * grads * grads
        m_hat = self.m / (1 - self.beta1**t)
        v_hat = self.v / (1 - self.beta2**t)
        out = params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        if self.weight_decay:
            out = out - self.lr * self.weight_decay * params
        return out

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step_count": self.step_count,
            "m": None if self.m is None else self.m.copy(),
            "v": None if self.v is None else self.v.copy(),
        }

    @classmethod
    def from_state(cls, state: dict) -> "AdamW":
        opt = cls(
            lr=state["lr"],
            beta1=state["beta1"],
            beta2=state["beta2"],
            eps=state["eps"],
            weight_decay=state["weight_decay"],
        )
        opt.step_count = state["step_count"]
        opt.m = None if state["m"] is None else state["m"].copy()
        opt.v = None if state["v"] is None else state["v"].copy()
        return opt
