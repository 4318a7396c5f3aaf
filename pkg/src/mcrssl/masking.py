"""Multi-mask view generation (span masking)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import RngStream

MAX_REDRAWS = 8


@dataclass
class MaskPolicy:
    mask_prob: float = 0.15
    span_len: int = 5
    num_views: int = 4
    min_masked: int = 1
    min_unmasked: int = 1

    def validate(self) -> "MaskPolicy":
        if not 0.0 < self.mask_prob < 1.0:
            raise ValueError(f"mask_prob must be in (0, 1), got {self.mask_prob}")
        if self.span_len < 1 or self.num_views < 1:
            raise ValueError("span_len and num_views must be >= 1")
        if self.min_masked < 1 or self.min_unmasked < 1:
            raise ValueError("min_masked and min_unmasked must be >= 1")
        if self.min_masked > self.span_len:
            raise ValueError("min_masked larger than span_len cannot be met by the single-span fallback")
        return self


@dataclass
class MaskedView:
    sample_id: int
    view_id: int
    mask: np.ndarray  # bool, True = masked

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())


def span_mask(t: int, policy: MaskPolicy, rng: RngStream) -> np.ndarray:
    starts = np.flatnonzero(rng.uniform(t) < policy.mask_prob)
    mask = np.zeros(t, dtype=bool)
    for s in starts:
        mask[s:s + policy.span_len] = True
    return mask


def fallback_mask(t: int, policy: MaskPolicy, rng: RngStream) -> np.ndarray:
    start = int(rng.integers(0, t - policy.span_len + 1))
    mask = np.zeros(t, dtype=bool)
    mask[start:start + policy.span_len] = True
    return mask


def _acceptable(mask: np.ndarray, policy: MaskPolicy) -> bool:
    n = int(mask.sum())
    return n >= policy.min_masked and mask.size - n >= policy.min_unmasked


def sample_masks(t: int, policy: MaskPolicy, rng: RngStream, sample_id: int = 0,
                 force_fallback: bool = False) -> list[MaskedView]:
    """Draw ``policy.num_views`` independent span masks over ``t`` frames.

    View ``m`` uses the sub-stream ``rng.split("view", m)``. A draw that
    violates the min-masked/min-unmasked bounds is redrawn up to
    ``MAX_REDRAWS`` times, after which a single span at a random offset is
    used.
    """
    policy.validate()
    if t <= policy.span_len:
        raise ValueError(f"need more frames ({t}) than span_len ({policy.span_len})")
    if t - policy.span_len < policy.min_unmasked:
        raise ValueError(f"{t} frames cannot keep {policy.min_unmasked} unmasked around one span")
    views = []
    for m in range(policy.num_views):
        vr = rng.split("view", m)
        mask = None
        if not force_fallback:
            for _ in range(MAX_REDRAWS):
                cand = span_mask(t, policy, vr)
                if _acceptable(cand, policy):
                    mask = cand
                    break
        if mask is None:
            mask = fallback_mask(t, policy, vr)
        views.append(MaskedView(sample_id, m, mask))
    return views


def expected_masked_fraction(t: int, policy: MaskPolicy) -> float:
    """Closed form for the un-redrawn span process, edge truncation included.

    Frame ``i`` is covered iff a span starts in ``[i - l + 1, i]``; near the
    left edge fewer starts are available.
    """
    q = 1.0 - policy.mask_prob
    cover = [1.0 - q ** min(i + 1, policy.span_len) for i in range(t)]
    return float(sum(cover) / t)
