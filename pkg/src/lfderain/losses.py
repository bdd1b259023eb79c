"""Pixel losses shared by the three networks."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, abs_, as_tensor, mean, square


def smooth_l1(x) -> Tensor:
    """Mean of ``0.5 x^2`` where ``|x| < 1`` and ``|x| - 0.5`` elsewhere."""
    x = as_tensor(x)
    a = np.abs(x.data)
    small = a < 1.0
    vals = np.where(small, 0.5 * x.data * x.data, a - 0.5)
    n = x.size
    out = np.asarray(vals.sum() / n)
    return Tensor._node(out, (x,), lambda g: (g * np.where(small, x.data, np.sign(x.data)) / n,))


def l1_mean(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1 operands differ: {a.shape} vs {b.shape}")
    return mean(abs_(a - b))


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse operands differ: {a.shape} vs {b.shape}")
    return mean(square(a - b))
