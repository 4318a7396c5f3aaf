"""Dual prediction loss, sub-model consistency loss and their combination."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor
from .autodiff import functional as F

REDUCTIONS = ("mean", "sum")
STOPGRAD = ("none", "f1", "f2")


@dataclass
class LossBundle:
    L_pred1: Tensor
    L_pred2: Tensor
    L_pred: Tensor
    L_mcr: Tensor
    L_total: Tensor
    lam: float

    def values(self) -> dict[str, float]:
        return {
            "L_pred1": self.L_pred1.item(),
            "L_pred2": self.L_pred2.item(),
            "L_pred": self.L_pred.item(),
            "L_mcr": self.L_mcr.item(),
            "L_total": self.L_total.item(),
        }


def _sq_dist(a: Tensor, b: Tensor, reduction: str) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"loss operands differ in shape: {a.shape} vs {b.shape}")
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}")
    d = F.square(a - b)
    return F.mean(d) if reduction == "mean" else F.sum(d)


def pred_loss(y_masked, f1: Tensor, f2: Tensor, reduction: str = "mean") -> tuple[Tensor, Tensor, Tensor]:
    """``(L_pred1, L_pred2, L_pred1 + L_pred2)``; the target never takes gradient."""
    y = Tensor._wrap(np.asarray(y_masked.data if isinstance(y_masked, Tensor) else y_masked, dtype=f1.dtype))
    l1 = _sq_dist(y, f1, reduction)
    l2 = _sq_dist(y, f2, reduction)
    return l1, l2, l1 + l2


def pred1_loss(y_masked, f1: Tensor, reduction: str = "mean") -> Tensor:
    y = Tensor._wrap(np.asarray(y_masked.data if isinstance(y_masked, Tensor) else y_masked, dtype=f1.dtype))
    return _sq_dist(y, f1, reduction)


def mcr_loss(f1: Tensor, f2: Tensor, reduction: str = "mean", stopgrad: str = "none") -> Tensor:
    """Squared distance between the two sub-model predictions.

    ``stopgrad`` detaches one branch for ablations; by default both
    predictions receive gradient.
    """
    if stopgrad not in STOPGRAD:
        raise ValueError(f"stopgrad must be one of {STOPGRAD}")
    if stopgrad == "f1":
        f1 = f1.detach()
    elif stopgrad == "f2":
        f2 = f2.detach()
    return _sq_dist(f1, f2, reduction)


def total_loss(l_pred1: Tensor, l_pred2: Tensor, l_mcr: Tensor, lam: float = 1.0,
               l_pred: Tensor | None = None) -> LossBundle:
    """Compose ``L_total = L_pred + lam * L_mcr``.

    At ``lam == 0`` the consistency term is left out of the graph entirely
    and only reported.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if l_pred is None:
        l_pred = l_pred1 + l_pred2
    if lam == 0:
        total = l_pred
        l_mcr = l_mcr.detach()
    else:
        total = l_pred + l_mcr * lam
    return LossBundle(l_pred1, l_pred2, l_pred, l_mcr, total, float(lam))


def mcr_objective(y_masked, f1: Tensor, f2: Tensor, lam: float = 1.0, reduction: str = "mean",
                  stopgrad: str = "none") -> LossBundle:
    l1, l2, lp = pred_loss(y_masked, f1, f2, reduction)
    return total_loss(l1, l2, mcr_loss(f1, f2, reduction, stopgrad), lam, l_pred=lp)
