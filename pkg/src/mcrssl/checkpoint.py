"""Versioned binary checkpoint of named arrays.

Layout (little-endian)::

    8 bytes   magic b"MCRSSLCK"
    u32       format version
    u32       config length, then that many bytes of UTF-8 JSON
    u32       array count
    per array:
      u16 name length, UTF-8 name
      u8  dtype tag (see DTYPE_TAGS)
      u8  ndim, then ndim x u64 dims
      raw payload, C order

Arrays are written in the order given, so save -> load -> save is
byte-identical.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MCRSSLCK"
VERSION = 1

DTYPE_TAGS = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("<u8"),
}
_TAG_OF = {v: k for k, v in DTYPE_TAGS.items()}


class CheckpointError(Exception):
    code = 1


class CheckpointVersionError(CheckpointError):
    """Bad magic bytes or unsupported format version."""

    code = 4


class CheckpointTruncatedError(CheckpointError):
    code = 6


class CheckpointNameError(CheckpointError):
    """Stored array names do not match what the model expects."""

    code = 7


def dumps(config: dict, arrays: dict[str, np.ndarray]) -> bytes:
    cfg = json.dumps(config, sort_keys=True, ensure_ascii=False).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _TAG_OF:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _TAG_OF[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointVersionError("not a checkpoint: bad magic bytes")
    r = _Reader(buf)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {VERSION}")
    (cfg_len,) = r.unpack("<I")
    config = json.loads(r.take(cfg_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        tag, ndim = r.unpack("<BB")
        if tag not in DTYPE_TAGS:
            raise CheckpointVersionError(f"{name}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        dt = DTYPE_TAGS[tag]
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape).copy()
    if r.pos != len(buf):
        raise CheckpointTruncatedError(f"{len(buf) - r.pos} trailing bytes after last array")
    return config, arrays


def save(path: str | Path, config: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(config, arrays))
    os.replace(tmp, path)


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())


def check_names(expected, actual, what: str) -> None:
    expected, actual = set(expected), set(actual)
    if expected != actual:
        missing = sorted(expected - actual)
        extra = sorted(actual - expected)
        raise CheckpointNameError(f"{what}: missing {missing[:5]}{'...' if len(missing) > 5 else ''}, "
                                  f"unexpected {extra[:5]}{'...' if len(extra) > 5 else ''}")
