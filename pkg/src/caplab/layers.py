"""Parameterized building blocks: dense, embedding, LSTM cell.

Initialization convention, applied uniformly: weight matrices are uniform
in [-a, a] with a = sqrt(6 / (fan_in + fan_out)); biases start at zero
except the LSTM forget-gate slice, which starts at 1.0.  Fresh values are
snapped to the float32 grid so that checkpoint serialization (float32)
round-trips without loss.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, concat, matmul, narrow, sigmoid, tanh, embedding_row


def _f32_grid(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[1]
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return _f32_grid(rng.uniform(-a, a, size=shape))


class Dense:
    """Affine map y = x @ w + b with w stored (in_dim, out_dim)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.w = Tensor(glorot_uniform(rng, (in_dim, out_dim)), requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.w) + self.b

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("w", self.w), ("b", self.b)]


class Embedding:
    """Lookup table of shape (rows, dim)."""

    def __init__(self, rows: int, dim: int, rng: np.random.Generator):
        self.rows = rows
        self.dim = dim
        self.table = Tensor(glorot_uniform(rng, (rows, dim)), requires_grad=True)

    def __call__(self, idx: int) -> Tensor:
        return embedding_row(self.table, idx)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("table", self.table)]


class LstmCell:
    """Single-step LSTM with packed gates.

    The combined weight has shape (4h, in_dim + h); gate slices are ordered
    (input, forget, cell, output) along the first axis.  step consumes the
    previous (h, c) and returns the next pair; callers own the unroll.
    """

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.hidden = hidden
        # packed (4h, in+h): fan_in = in+h, fan_out = 4h
        fan_in = in_dim + hidden
        fan_out = 4 * hidden
        a = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-a, a, size=(4 * hidden, fan_in))
        self.w = Tensor(_f32_grid(w), requires_grad=True)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.b = Tensor(b, requires_grad=True)

    def zero_state(self) -> tuple[Tensor, Tensor]:
        return Tensor(np.zeros(self.hidden)), Tensor(np.zeros(self.hidden))

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        hdim = self.hidden
        z = matmul(self.w, concat([x, h])) + self.b
        gate_i = sigmoid(narrow(z, 0, hdim))
        gate_f = sigmoid(narrow(z, hdim, 2 * hdim))
        gate_g = tanh(narrow(z, 2 * hdim, 3 * hdim))
        gate_o = sigmoid(narrow(z, 3 * hdim, 4 * hdim))
        c_next = gate_f * c + gate_i * gate_g
        h_next = gate_o * tanh(c_next)
        return h_next, c_next

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("w", self.w), ("b", self.b)]
