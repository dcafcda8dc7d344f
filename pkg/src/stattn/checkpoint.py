"""Binary checkpoint format for named float32 tensors.

Layout, all integers little-endian:

    magic   4 bytes  "STWT"
    version u16      currently 1
    count   u32      number of tensors
    per tensor:
        name_len u16
        name     UTF-8 bytes
        rank     u8
        extents  rank x u32
        data     prod(extents) little-endian f32

Values are stored as f32 regardless of in-memory dtype; loading returns f32
arrays. A sidecar text file (same `key = value` syntax as the CLI config)
records the architecture next to each checkpoint so inference can rebuild
the model; that file is handled by config.py, not here.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from stattn.errors import DataError

MAGIC = b"STWT"
VERSION = 1
_MAX_RANK = 8


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    blobs = [struct.pack("<4sHI", MAGIC, VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise DataError(f"tensor name too long: {len(raw)} bytes")
        a = np.ascontiguousarray(arr, dtype="<f4")
        if a.ndim > _MAX_RANK:
            raise DataError(f"tensor {name!r} has rank {a.ndim} > {_MAX_RANK}")
        blobs.append(struct.pack("<H", len(raw)))
        blobs.append(raw)
        blobs.append(struct.pack("<B", a.ndim))
        blobs.append(struct.pack(f"<{a.ndim}I", *a.shape))
        blobs.append(a.tobytes())
    Path(path).write_bytes(b"".join(blobs))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataError(f"truncated checkpoint: expected {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    r = _Reader(buf)
    magic, version, count = r.unpack("<4sHI", "header")
    if magic != MAGIC:
        raise DataError(f"bad magic {magic!r}, want {MAGIC!r}", 0)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}", 4)
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        name_at = r.pos
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise DataError("tensor name is not valid UTF-8", name_at) from e
        (rank,) = r.unpack("<B", f"rank of {name!r}")
        if rank > _MAX_RANK:
            raise DataError(f"tensor {name!r} rank {rank} > {_MAX_RANK}", r.pos - 1)
        shape = r.unpack(f"<{rank}I", f"extents of {name!r}") if rank else ()
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data_at = r.pos
        raw = r.take(4 * n, f"data of {name!r}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise DataError(f"tensor {name!r} contains non-finite values", data_at)
        if name in out:
            raise DataError(f"duplicate tensor name {name!r}", name_at)
        out[name] = arr
    if r.pos != len(buf):
        raise DataError(f"{len(buf) - r.pos} trailing bytes after last tensor", r.pos)
    return out
