"""Central finite-difference check of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

FD_STEP = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, h: float = FD_STEP) -> np.ndarray:
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


def gradcheck(fn: Callable[[], Tensor], inputs: Tensor | Sequence[Tensor], h: float = FD_STEP) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` rebuilds the graph from scratch on every call and must be
    deterministic (freeze any dropout by handing it a fresh copy of a fixed
    stream). Inputs must be 64-bit leaves with ``requires_grad`` set.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    for x in inputs:
        if x.dtype != np.float64:
            raise TypeError("gradcheck needs float64 inputs")
        x.grad = None
    loss = fn()
    loss.backward()
    worst = 0.0
    for x in inputs:
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        worst = max(worst, relative_error(analytic, numeric_grad(fn, x, h)))
    return worst
