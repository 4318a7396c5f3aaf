"""EMA teacher: decay schedule, parameter tracking and target construction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .model import ModelConfig, encoder_param_prefixes


@dataclass
class EmaSchedule:
    tau_start: float = 0.999
    tau_end: float = 0.9999
    tau_updates: int = 30000

    def validate(self) -> "EmaSchedule":
        if not 0.0 <= self.tau_start <= self.tau_end <= 1.0:
            raise ValueError(f"need 0 <= tau_start <= tau_end <= 1, got {self.tau_start}, {self.tau_end}")
        if self.tau_updates < 0:
            raise ValueError("tau_updates must be >= 0")
        return self


def tau_at(step: int, sched: EmaSchedule) -> float:
    """Linear ramp from ``tau_start`` to ``tau_end``, then held constant."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step >= sched.tau_updates:
        return sched.tau_end
    return sched.tau_start + (sched.tau_end - sched.tau_start) * step / sched.tau_updates


class TeacherState:
    """EMA copies of the tracked student parameters.

    Untracked parameters (by default the feature encoder) are held by
    reference, so the teacher always sees the student's current values.
    """

    def __init__(self, tracked: dict[str, Tensor], shared: dict[str, Tensor]):
        self.tracked = tracked
        self.shared = shared

    @classmethod
    def from_student(cls, student: dict[str, Tensor], cfg: ModelConfig,
                     track_feature_encoder: bool = False) -> "TeacherState":
        prefixes = encoder_param_prefixes(cfg)
        if track_feature_encoder:
            prefixes = prefixes + ("feature_encoder.",)
        tracked, shared = {}, {}
        for name, p in student.items():
            if name.startswith(prefixes):
                tracked[name] = Tensor(p.data.copy(), requires_grad=False, name=name)
            elif name.startswith("feature_encoder."):
                shared[name] = p
        return cls(tracked, shared)

    @property
    def params(self) -> dict[str, Tensor]:
        """View used for teacher forward passes (tracked + shared)."""
        return {**self.shared, **self.tracked}


def ema_update(teacher: TeacherState, student: dict[str, Tensor], tau: float) -> None:
    """In place: ``teacher <- tau * teacher + (1 - tau) * student``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    missing = sorted(set(teacher.tracked) - set(student))
    if missing:
        raise KeyError(f"student is missing tracked parameters: {missing}")
    for name, t in teacher.tracked.items():
        s = student[name].data
        if s.shape != t.data.shape:
            raise ValueError(f"shape mismatch for {name}: {t.data.shape} vs {s.shape}")
        # endpoints exact, including signed zeros
        if tau == 1.0:
            continue
        if tau == 0.0:
            np.copyto(t.data, s)
            continue
        dt = t.data.dtype.type
        t.data *= dt(tau)
        t.data += dt(1.0 - tau) * s


@dataclass
class TargetRepresentation:
    y: np.ndarray  # (T, d_model)
    k: int


def instance_norm(x: np.ndarray, eps: float = 1e-5, axis: int = -1) -> np.ndarray:
    """Zero mean, unit variance along ``axis``, no affine.

    ``axis=-1`` normalises each frame over its features; ``axis=0``
    normalises each channel over time.
    """
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    return xc / np.sqrt(var + eps)


TARGET_NORMS = {"instance": -1, "time": 0, "none": None}


def build_target(block_outputs: list, k: int, norm: str = "instance") -> TargetRepresentation:
    """Average of the top ``k`` teacher block outputs, each normalised first.

    ``norm`` is ``instance`` (per frame over features), ``time`` (per
    channel over frames) or ``none``.
    """
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if k > len(block_outputs):
        raise ValueError(f"K={k} exceeds the {len(block_outputs)} available block outputs")
    if norm not in TARGET_NORMS:
        raise ValueError(f"unknown target norm {norm!r}; choose from {sorted(TARGET_NORMS)}")
    axis = TARGET_NORMS[norm]
    top = [b.data if isinstance(b, Tensor) else np.asarray(b) for b in block_outputs[-k:]]
    acc = None
    for h in top:
        h = instance_norm(h, axis=axis) if axis is not None else h
        acc = h.copy() if acc is None else acc + h
    return TargetRepresentation(acc / k if k > 1 else acc, k)
