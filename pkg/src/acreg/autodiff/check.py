"""Gradient verification against central finite differences.

The graph under test is rebuilt in float64 and compared coordinate by
coordinate: f is evaluated twice per probed coordinate with the value
nudged by +/- step. Large tensors are probed on a deterministic random
subset of coordinates.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor, backward


def finite_difference_gradient(f, tensors, index: int, coords, step: float = 1e-4) -> np.ndarray:
    """Central-difference d f / d tensors[index] at the given flat coordinates.

    ``f`` must evaluate the scalar under test from ``tensors`` without
    any autodiff involvement beyond forward arithmetic.
    """
    target = tensors[index]
    flat = target.data.reshape(-1)
    grads = np.zeros(len(coords), dtype=np.float64)
    for n, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + step
        hi = float(f(*tensors).data)
        flat[c] = orig - step
        lo = float(f(*tensors).data)
        flat[c] = orig
        grads[n] = (hi - lo) / (2.0 * step)
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(f, tensors, step: float = 1e-4, max_coords: int = 32,
                    rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and finite differences.

    ``f(*tensors)`` must return a scalar Tensor. All inputs must be
    float64 with requires_grad=True. Returns the worst relative error
    over all probed coordinates of all inputs.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        if t.data.dtype != np.float64:
            raise ValueError("gradient checks require float64 tensors")
        t.zero_grad()
    with Tape():
        loss = f(*tensors)
        backward(loss)
    worst = 0.0
    for i, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        n = t.data.size
        if n <= max_coords:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords, replace=False)
        numeric = finite_difference_gradient(f, tensors, i, coords, step)
        analytic = t.grad.reshape(-1)[coords]
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst
