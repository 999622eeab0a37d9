"""Finite-difference verification of analytic gradients.

Central differences with step 1e-5, relative error per coordinate
|analytic - numeric| / max(1, |analytic|), reduced by max over all
coordinates of all checked tensors.  Callers run in float64.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, zero_grads


def grad_check(fn: Callable[..., Tensor], points, step: float = 1e-5) -> float:
    """Max relative error between analytic and numeric gradients of fn.

    fn maps the given tensors to a scalar Tensor.  points may be a single
    Tensor or a sequence; every point must have requires_grad set.
    """
    pts: list[Tensor] = [points] if isinstance(points, Tensor) else list(points)
    zero_grads(pts)
    loss = fn(*pts)
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in pts]

    worst = 0.0
    with no_grad():
        for p, an in zip(pts, analytic):
            flat = p.data.reshape(-1)
            an_flat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = float(fn(*pts).data)
                flat[i] = orig - step
                lo = float(fn(*pts).data)
                flat[i] = orig
                numeric = (hi - lo) / (2.0 * step)
                rel = abs(an_flat[i] - numeric) / max(1.0, abs(an_flat[i]))
                if rel > worst:
                    worst = rel
    zero_grads(pts)
    return worst
