"""Adam / SGD over named float arrays, warmup + linear-decay schedule, clipping."""
from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


def lr_at(step: int, base_lr: float, warmup: int, total: int, schedule: str = "linear") -> float:
    """Learning rate for update ``step`` (0-based)."""
    if schedule == "constant":
        return base_lr
    if schedule != "linear":
        raise ValueError(f"unknown lr schedule {schedule!r}")
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    if total <= warmup:
        return base_lr
    return base_lr * max(0.0, (total - step) / (total - warmup))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale in place when the global L2 norm exceeds ``max_norm``; returns the norm.

    The scale is ``max_norm / norm`` with no epsilon, so doubling every
    gradient doubles the norm exactly and leaves the clipped result unchanged.
    """
    total = 0.0
    for g in grads.values():
        total += float(np.dot(g.reshape(-1).astype(np.float64), g.reshape(-1).astype(np.float64)))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= g.dtype.type(scale)
    return norm


class Adam:
    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.98), eps: float = 1e-6):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            dt = p.data.dtype.type
            m, v = self.m[k], self.v[k]
            m *= dt(self.b1)
            m += dt(1.0 - self.b1) * g
            v *= dt(self.b2)
            v += dt(1.0 - self.b2) * (g * g)
            denom = np.sqrt(v / dt(c2)) + dt(self.eps)
            p.data -= dt(lr) * ((m / dt(c1)) / denom)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"optim.m.{k}": v for k, v in self.m.items()}
        out.update({f"optim.v.{k}": v for k, v in self.v.items()})
        out["optim.t"] = np.array([self.t], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k in self.params:
            np.copyto(self.m[k], arrays[f"optim.m.{k}"])
            np.copyto(self.v[k], arrays[f"optim.v.{k}"])
        self.t = int(arrays["optim.t"][0])


class SGD:
    """Plain ``p -= lr * g``; kept for algebraic identity checks on the update rule."""

    def __init__(self, params: dict[str, Tensor]):
        self.params = params
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        for k, p in self.params.items():
            g = grads.get(k)
            if g is not None:
                p.data -= p.data.dtype.type(lr) * g

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"optim.t": np.array([self.t], dtype=np.int64)}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["optim.t"][0])


def make_optimizer(name: str, params: dict[str, Tensor], betas=(0.9, 0.98), eps: float = 1e-6):
    if name == "adam":
        return Adam(params, betas, eps)
    if name == "sgd":
        return SGD(params)
    raise ValueError(f"unknown optimizer {name!r}")
