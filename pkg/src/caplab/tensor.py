"""Reverse-mode automatic differentiation over dense numpy arrays.

Every operation returns a new `Tensor` and, while gradients are enabled,
records its inputs plus a backward closure.  `backward` on a scalar loss
walks the recorded graph once in reverse topological order and adds
`dloss/dtensor` into the `.grad` slot of every tensor that asked for
gradients.  Repeated backward calls accumulate; `zero_grads` resets.

All arrays are float64.  Checkpoint serialization narrows to float32
elsewhere; nothing in this module ever down-casts.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, GraphError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, baselines)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A numpy array plus an optional gradient slot and tape record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- primitive operations ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(
            f"add: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from exc

    def backward(g, acc):
        acc(a, _unbroadcast(g, a.data.shape))
        acc(b, _unbroadcast(g, b.data.shape))

    return _from_op(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(
            f"mul: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from exc

    def backward(g, acc):
        acc(a, _unbroadcast(g * b.data, a.data.shape))
        acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _from_op(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise ShapeError("matmul supports 1-D and 2-D operands only")
    inner_a = ad.shape[-1]
    inner_b = bd.shape[0]
    if inner_a != inner_b:
        raise ShapeError(f"matmul: inner dims differ, {ad.shape} @ {bd.shape}")
    data = ad @ bd

    if ad.ndim == 1 and bd.ndim == 1:

        def backward(g, acc):
            acc(a, g * bd)
            acc(b, g * ad)

    elif ad.ndim == 2 and bd.ndim == 1:

        def backward(g, acc):
            acc(a, np.outer(g, bd))
            acc(b, ad.T @ g)

    elif ad.ndim == 1 and bd.ndim == 2:

        def backward(g, acc):
            acc(a, bd @ g)
            acc(b, np.outer(ad, g))

    else:

        def backward(g, acc):
            acc(a, g @ bd.T)
            acc(b, ad.T @ g)

    return _from_op(data, (a, b), backward)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    data = np.where(mask, x.data, 0.0)

    def backward(g, acc):
        acc(x, g * mask)

    return _from_op(data, (x,), backward)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    # split by sign so exp never overflows
    data = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                    np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))

    def backward(g, acc):
        acc(x, g * data * (1.0 - data))

    return _from_op(data, (x,), backward)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    data = np.tanh(x.data)

    def backward(g, acc):
        acc(x, g * (1.0 - data * data))

    return _from_op(data, (x,), backward)


def softmax(x) -> Tensor:
    """Stable softmax over a non-empty 1-D vector (max subtracted first)."""
    x = _as_tensor(x)
    if x.data.ndim != 1:
        raise ShapeError(f"softmax expects a vector, got shape {x.data.shape}")
    if x.data.size == 0:
        raise DomainError("softmax over an empty axis")
    z = x.data - x.data.max()
    e = np.exp(z)
    data = e / e.sum()

    def backward(g, acc):
        acc(x, data * (g - np.dot(g, data)))

    return _from_op(data, (x,), backward)


def log_softmax(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 1:
        raise ShapeError(f"log_softmax expects a vector, got shape {x.data.shape}")
    if x.data.size == 0:
        raise DomainError("log_softmax over an empty axis")
    z = x.data - x.data.max()
    lse = np.log(np.exp(z).sum())
    data = z - lse
    sm = np.exp(data)

    def backward(g, acc):
        acc(x, g - sm * g.sum())

    return _from_op(data, (x,), backward)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty list")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[p.data.shape for p in parts]}") from exc
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g, acc):
        offset = 0
        for p, n in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + n)
            acc(p, g[tuple(sl)])
            offset += n

    return _from_op(data, tuple(parts), backward)


def stack(rows: Sequence) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    rows = [_as_tensor(r) for r in rows]
    if not rows:
        raise ShapeError("stack of an empty list")
    data = np.stack([r.data for r in rows], axis=0)

    def backward(g, acc):
        for i, r in enumerate(rows):
            acc(r, g[i])

    return _from_op(data, tuple(rows), backward)


def narrow(x, start: int, stop: int) -> Tensor:
    """Contiguous slice along axis 0."""
    x = _as_tensor(x)
    if not (0 <= start <= stop <= x.data.shape[0]):
        raise ShapeError(f"narrow [{start}:{stop}] outside axis of extent {x.data.shape[0]}")
    data = x.data[start:stop].copy()

    def backward(g, acc):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        acc(x, full)

    return _from_op(data, (x,), backward)


def row(x, i: int) -> Tensor:
    """Select row i of a 2-D tensor as a vector."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"row expects a matrix, got shape {x.data.shape}")
    if not (0 <= i < x.data.shape[0]):
        raise DomainError(f"row {i} outside matrix with {x.data.shape[0]} rows")
    data = x.data[i].copy()

    def backward(g, acc):
        full = np.zeros_like(x.data)
        full[i] = g
        acc(x, full)

    return _from_op(data, (x,), backward)


def pick(x, i: int) -> Tensor:
    """Scalar element i of a vector."""
    x = _as_tensor(x)
    if x.data.ndim != 1:
        raise ShapeError(f"pick expects a vector, got shape {x.data.shape}")
    if not (0 <= i < x.data.shape[0]):
        raise DomainError(f"pick index {i} outside vector of length {x.data.shape[0]}")
    data = np.asarray(x.data[i])

    def backward(g, acc):
        full = np.zeros_like(x.data)
        full[i] = g
        acc(x, full)

    return _from_op(data, (x,), backward)


def embedding_row(table, idx: int) -> Tensor:
    """Row lookup into an embedding table; grads accumulate into that row."""
    table = _as_tensor(table)
    if table.data.ndim != 2:
        raise ShapeError("embedding table must be 2-D")
    if not (0 <= idx < table.data.shape[0]):
        raise DomainError(f"unknown id {idx} for table with {table.data.shape[0]} rows")
    data = table.data[idx].copy()

    def backward(g, acc):
        full = np.zeros_like(table.data)
        full[idx] = g
        acc(table, full)

    return _from_op(data, (table,), backward)


def tsum(x) -> Tensor:
    x = _as_tensor(x)
    data = np.asarray(x.data.sum())

    def backward(g, acc):
        acc(x, np.broadcast_to(g, x.data.shape).copy())

    return _from_op(data, (x,), backward)


def tmean(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.size == 0:
        raise DomainError("mean of an empty tensor")
    data = np.asarray(x.data.mean())
    n = x.data.size

    def backward(g, acc):
        acc(x, np.broadcast_to(g / n, x.data.shape).copy())

    return _from_op(data, (x,), backward)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


# -- backward pass ----------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dt into .grad for every requires_grad tensor.

    The traversal keeps per-pass gradients in a side table so that calling
    backward twice adds exactly twice the single-pass gradient.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("backward expects a Tensor")
    if loss.data.size != 1:
        raise GraphError(f"backward from non-scalar of shape {loss.data.shape}")
    order = _toposort(loss)
    local: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    def acc(t: Tensor, g: np.ndarray):
        if not t.requires_grad:
            return
        k = id(t)
        held = local.get(k)
        local[k] = g if held is None else held + g

    for node in reversed(order):
        g = local.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._backward is not None:
            node._backward(g, acc)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
