"""Named-tensor archive used for checkpoints.

Layout (all integers little-endian)::

    b"FC2N"                magic
    u32                    format version
    u32                    tensor count
    per tensor:
        u16 + bytes        UTF-8 name
        u8                 rank
        u32 * rank         dims
        f32 * prod(dims)   values
    u64                    step counter

Reading is all-or-nothing: the whole file is parsed and validated before
anything is returned.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from fc2n.errors import CheckpointError

MAGIC = b"FC2N"
VERSION = 1


class CheckpointVersionError(CheckpointError):
    """Wrong magic bytes or unsupported format version."""


def write_archive(tensors: dict[str, np.ndarray], step: int, path) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        if arr.ndim > 255:
            raise ValueError(f"rank {arr.ndim} too large for {name}")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    parts.append(struct.pack("<Q", step))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        for p in parts:
            f.write(p)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint (needed {n} bytes at offset {self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_archive(path) -> tuple[dict[str, np.ndarray], int]:
    """Return (tensors by name, step counter)."""
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointVersionError(f"{path}: not an FC2N checkpoint (bad magic)")
    r.take(4)
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt tensor name") from exc
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor {name!r}")
        tensors[name] = data
    remaining = len(buf) - r.pos
    if remaining != 8:
        raise CheckpointError(
            f"{path}: tensor count mismatch ({count} declared, {remaining - 8:+d} unexpected trailing bytes)"
            if remaining > 8 else f"{path}: truncated checkpoint (missing step counter)"
        )
    (step,) = r.unpack("<Q")
    return tensors, step


def encode_float64(value: float) -> np.ndarray:
    """Bit pattern of a float64 carried as two float32 words (exact round trip)."""
    return np.array([value], dtype="<f8").view("<f4").copy()


def decode_float64(words: np.ndarray) -> float:
    return float(np.ascontiguousarray(words, dtype="<f4").view("<f8")[0])
