"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Var`` wraps a float64 ndarray and remembers how it was produced; calling
:func:`backward` on a scalar ``Var`` walks the recorded graph once in reverse
topological order and accumulates gradients into every reachable leaf. Only
the primitives needed by the policy networks and path-space losses are
implemented: matmul, broadcast add/sub/mul, tanh, row-wise log-softmax,
flat gather, segment sum, reshape and reductions.
"""

from __future__ import annotations

from typing import Callable, Optional, Tuple

import numpy as np

from .errors import ContractError

Array = np.ndarray


class Var:
    """Node of the computation graph.

    ``needs_grad`` marks whether any ancestor is a tracked parameter;
    backward closures skip untracked parents so constants (state encodings,
    per-trajectory offsets) cost nothing extra.
    """

    __slots__ = ("data", "grad", "needs_grad", "_parents", "_bw")

    def __init__(
        self,
        data,
        needs_grad: bool = False,
        parents: Tuple["Var", ...] = (),
        bw: Optional[Callable[[], None]] = None,
    ):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.grad: Optional[Array] = None
        self.needs_grad = needs_grad
        self._parents = parents
        self._bw = bw

    @property
    def shape(self):
        return self.data.shape

    def _acc(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):  # pragma: no cover - debug aid
        return f"Var(shape={self.data.shape}, needs_grad={self.needs_grad})"


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g: Array, shape: Tuple[int, ...]) -> Array:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _make(data: Array, parents: Tuple[Var, ...], bw: Callable[[], None]) -> Var:
    ng = any(p.needs_grad for p in parents)
    return Var(data, needs_grad=ng, parents=parents, bw=bw if ng else None)


def matmul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    out_data = a.data @ b.data

    def bw():
        g = out.grad
        if a.needs_grad:
            a._acc(g @ b.data.T)
        if b.needs_grad:
            b._acc(a.data.T @ g)

    out = _make(out_data, (a, b), bw)
    return out


def add(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    out_data = a.data + b.data

    def bw():
        g = out.grad
        if a.needs_grad:
            a._acc(_unbroadcast(g, a.data.shape))
        if b.needs_grad:
            b._acc(_unbroadcast(g, b.data.shape))

    out = _make(out_data, (a, b), bw)
    return out


def sub(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    out_data = a.data - b.data

    def bw():
        g = out.grad
        if a.needs_grad:
            a._acc(_unbroadcast(g, a.data.shape))
        if b.needs_grad:
            b._acc(_unbroadcast(-g, b.data.shape))

    out = _make(out_data, (a, b), bw)
    return out


def mul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    out_data = a.data * b.data

    def bw():
        g = out.grad
        if a.needs_grad:
            a._acc(_unbroadcast(g * b.data, a.data.shape))
        if b.needs_grad:
            b._acc(_unbroadcast(g * a.data, b.data.shape))

    out = _make(out_data, (a, b), bw)
    return out


def tanh(a: Var) -> Var:
    a = _as_var(a)
    t = np.tanh(a.data)

    def bw():
        if a.needs_grad:
            a._acc(out.grad * (1.0 - t * t))

    out = _make(t, (a,), bw)
    return out


def square(a: Var) -> Var:
    a = _as_var(a)

    def bw():
        if a.needs_grad:
            a._acc(out.grad * (2.0 * a.data))

    out = _make(a.data * a.data, (a,), bw)
    return out


def log_softmax_rows(a: Var) -> Var:
    """Row-wise log-softmax of a 2-D array, stabilised by max subtraction."""
    a = _as_var(a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out_data = z - lse

    def bw():
        if a.needs_grad:
            g = out.grad
            p = np.exp(out_data)
            a._acc(g - p * g.sum(axis=1, keepdims=True))

    out = _make(out_data, (a,), bw)
    return out


def reshape(a: Var, shape) -> Var:
    a = _as_var(a)

    def bw():
        if a.needs_grad:
            a._acc(out.grad.reshape(a.data.shape))

    out = _make(a.data.reshape(shape), (a,), bw)
    return out


def take_flat(a: Var, idx: Array) -> Var:
    """Gather entries of the flattened array: ``out[k] = a.flat[idx[k]]``."""
    a = _as_var(a)
    idx = np.asarray(idx, dtype=np.intp)

    def bw():
        if a.needs_grad:
            g = np.zeros(a.data.size, dtype=np.float64)
            np.add.at(g, idx, out.grad)
            a._acc(g.reshape(a.data.shape))

    out = _make(a.data.reshape(-1)[idx], (a,), bw)
    return out


def segment_sum(values: Var, segments: Array, n_segments: int) -> Var:
    """``out[s] = sum of values[k] with segments[k] == s`` (length n_segments)."""
    values = _as_var(values)
    segments = np.asarray(segments, dtype=np.intp)
    out_data = np.zeros(n_segments, dtype=np.float64)
    np.add.at(out_data, segments, values.data)

    def bw():
        if values.needs_grad:
            values._acc(out.grad[segments])

    out = _make(out_data, (values,), bw)
    return out


def vsum(a: Var) -> Var:
    a = _as_var(a)

    def bw():
        if a.needs_grad:
            a._acc(np.full_like(a.data, out.grad))

    out = _make(np.asarray(a.data.sum()), (a,), bw)
    return out


def vmean(a: Var) -> Var:
    a = _as_var(a)
    n = a.data.size

    def bw():
        if a.needs_grad:
            a._acc(np.full_like(a.data, out.grad / n))

    out = _make(np.asarray(a.data.mean()), (a,), bw)
    return out


def backward(loss: Var) -> None:
    """Reverse-accumulate d(loss)/d(leaf) for every tracked leaf.

    Visits each recorded op exactly once (topological order). The loss must
    be scalar.
    """
    if loss.data.size != 1:
        raise ContractError("backward requires a scalar loss node")

    topo: list[Var] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            topo.append(node)
            continue
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.needs_grad:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._bw is not None:
            node._bw()
