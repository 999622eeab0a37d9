"""Adaptive-delta optimizer and global gradient norm clipping.

The update keeps two exponential moving averages per parameter, one of
squared gradients and one of squared applied deltas:

    Eg2 <- rho * Eg2 + (1 - rho) * g^2
    d    = -lr * sqrt(Ed2 + eps) / sqrt(Eg2 + eps) * g
    p   <- p + d
    Ed2 <- rho * Ed2 + (1 - rho) * d^2

The lr factor defaults to 1.0 (the classic rule).  Because the ratio of
running averages makes the step size invariant to gradient rescaling,
lr is the one knob that actually shrinks the step — gradient clipping
only changes the transient.  The policy-gradient stage relies on this.

Updated parameters are snapped to the float32 grid so a trained model
serializes to float32 checkpoints without rounding drift.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError
from .tensor import Tensor


class AdaDelta:
    def __init__(self, params: dict[str, Tensor], rho: float = 0.95, eps: float = 1e-6,
                 lr: float = 1.0):
        self.params = dict(params)
        self.names = list(params.keys())
        self.rho = rho
        self.eps = eps
        self.lr = lr
        self.sq_grad = {n: np.zeros_like(params[n].data) for n in self.names}
        self.sq_delta = {n: np.zeros_like(params[n].data) for n in self.names}

    def step(self) -> None:
        rho, eps = self.rho, self.eps
        for name in self.names:
            p = self.params[name]
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in {name}")
            eg2 = self.sq_grad[name]
            ed2 = self.sq_delta[name]
            eg2 *= rho
            eg2 += (1.0 - rho) * g * g
            delta = -self.lr * np.sqrt(ed2 + eps) / np.sqrt(eg2 + eps) * g
            p.data = (p.data + delta).astype(np.float32).astype(np.float64)
            ed2 *= rho
            ed2 += (1.0 - rho) * delta * delta

    def zero_grad(self) -> None:
        for name in self.names:
            self.params[name].grad = None


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm
