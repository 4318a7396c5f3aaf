"""Named entry points for every registered op, plus dropout."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .rng import RngStream
from .tensor import Tensor, forward_op


def add(a: Tensor, b: Tensor) -> Tensor:
    return forward_op("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return forward_op("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return forward_op("mul", a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return forward_op("matmul", a, b)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    return forward_op("transpose", x, axes=tuple(axes) if axes is not None else None)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return forward_op("reshape", x, shape=tuple(shape))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return forward_op("concat", *xs, axis=axis)


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    return forward_op("slice", x, index=index, axis=axis)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    return forward_op("sum", x, axis=axis)


def mean(x: Tensor, axis=None) -> Tensor:
    return forward_op("mean", x, axis=axis)


def square(x: Tensor) -> Tensor:
    return forward_op("square", x)


def sqrt(x: Tensor) -> Tensor:
    return forward_op("sqrt", x)


def exp(x: Tensor) -> Tensor:
    return forward_op("exp", x)


def log(x: Tensor) -> Tensor:
    return forward_op("log", x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return forward_op("softmax", x, axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return forward_op("log_softmax", x, axis=axis)


def gelu(x: Tensor) -> Tensor:
    return forward_op("gelu", x)


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               axis: int = -1, eps: float = 1e-5) -> Tensor:
    inputs = [x] + [t for t in (weight, bias) if t is not None]
    if bias is not None and weight is None:
        raise ValueError("layer_norm: bias without weight is not supported")
    return forward_op("layer_norm", *inputs, axis=axis, eps=eps)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad_left: int = 0, pad_right: int = 0) -> Tensor:
    y = forward_op("conv1d", x, weight, stride=stride, pad_left=pad_left, pad_right=pad_right)
    return y + bias if bias is not None else y


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if bias is None:
        return forward_op("matmul", x, weight)
    return forward_op("linear", x, weight, bias)


def attention(qkv: Tensor, n_heads: int, drop: np.ndarray | None = None) -> Tensor:
    """Self-attention over packed ``[q | k | v]``; ``drop`` scales the probabilities."""
    if drop is None:
        return forward_op("attention", qkv, n_heads=n_heads)
    return forward_op("attention", qkv, Tensor._wrap(drop), n_heads=n_heads)


def dropout_multiplier(shape: tuple, rate: float, rng: RngStream, dtype) -> tuple[np.ndarray, np.ndarray]:
    """``(keep, keep / (1 - rate))`` drawn from ``rng``."""
    keep = rng.uniform(shape) >= rate
    return keep, keep.astype(dtype) * np.dtype(dtype).type(1.0 / (1.0 - rate))


@dataclass(frozen=True)
class DropoutMask:
    keep: np.ndarray
    rate: float


def dropout(x: Tensor, rate: float, rng: RngStream, training: bool) -> tuple[Tensor, DropoutMask]:
    """Inverted dropout. Identity (same object) at inference or ``rate == 0``.

    Draws are taken from ``rng`` only when they are actually used, so a
    rate-0 layer does not shift the stream.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, DropoutMask(np.ones(x.shape, dtype=bool), rate)
    keep, scale = dropout_multiplier(x.shape, rate, rng, x.dtype)
    return x * Tensor._wrap(scale), DropoutMask(keep, rate)
