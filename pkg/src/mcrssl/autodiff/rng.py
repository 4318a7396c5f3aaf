"""Counter-based, splittable random streams.

A stream is the triple ``(seed, stream_id, counter)``. Draws come from the
Philox-4x64 block cipher keyed by ``(seed, stream_id)`` and evaluated at
successive counter values, so any triple can be replayed exactly and child
streams (``split``) are independent keys rather than offsets into one
sequence.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1
_WORDS_PER_BLOCK = 4


def derive_stream_id(parent: int, *path: int | str) -> int:
    h = hashlib.blake2b(digest_size=8, person=b"mcrssl-rng")
    h.update(struct.pack("<Q", parent & _MASK64))
    for item in path:
        if isinstance(item, str):
            raw = item.encode("utf-8")
            h.update(b"s" + struct.pack("<I", len(raw)) + raw)
        else:
            h.update(b"i" + struct.pack("<q", int(item)))
    return int.from_bytes(h.digest(), "little")


@dataclass
class RngStream:
    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        self.seed &= _MASK64
        self.stream_id &= _MASK64
        # bit generator positioned at self.counter, reused for sequential draws
        self._bg: np.random.Philox | None = None
        self._bg_counter = -1

    def copy(self) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.counter)

    def split(self, *path: int | str) -> "RngStream":
        """Child stream addressed by ``path``; does not advance this stream."""
        return RngStream(self.seed, derive_stream_id(self.stream_id, *path), 0)

    def state(self) -> tuple[int, int, int]:
        return (self.seed, self.stream_id, self.counter)

    def raw(self, n: int) -> np.ndarray:
        """``n`` uint64 words; the counter advances by whole 4-word blocks."""
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        blocks = -(-n // _WORDS_PER_BLOCK)
        if self._bg is None or self._bg_counter != self.counter:
            self._bg = np.random.Philox(
                key=np.array([self.seed, self.stream_id], dtype=np.uint64),
                counter=np.array([self.counter & _MASK64, self.counter >> 64, 0, 0], dtype=np.uint64),
            )
        out = self._bg.random_raw(blocks * _WORDS_PER_BLOCK)[:n]
        self.counter += blocks
        self._bg_counter = self.counter
        return out

    def uniform(self, shape=()) -> np.ndarray:
        """Float64 draws in [0, 1) with 53 random bits each."""
        n = math.prod(shape) if isinstance(shape, tuple) else int(shape)
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return u.reshape(shape)

    def normal(self, shape=()) -> np.ndarray:
        n = math.prod(shape) if isinstance(shape, tuple) else int(shape)
        m = -(-n // 2)
        u = self.uniform(2 * m)
        u1 = 1.0 - u[:m]  # (0, 1]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u[m:]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)

    def bernoulli(self, p: float, shape=()) -> np.ndarray:
        return self.uniform(shape) < p

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform ints in [low, high)."""
        if high <= low:
            raise ValueError("empty integer range")
        return (low + np.floor(self.uniform(shape) * (high - low))).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")
