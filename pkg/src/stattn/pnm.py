"""Binary PPM (P6, RGB) and PGM (P5, grayscale) reading and writing.

Header grammar: magic, then width, height, maxval as ASCII decimals
separated by whitespace; `#` starts a comment through end of line; a single
whitespace byte separates the maxval from the raw pixel payload. Only
maxval 255 is supported. Parse failures raise DataError with the byte
offset where the problem was found.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from stattn.errors import DataError

_WS = b" \t\r\n\v\f"


class _HeaderScanner:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def _skip_space_and_comments(self) -> None:
        while self.pos < len(self.buf):
            b = self.buf[self.pos : self.pos + 1]
            if b in (b"#",):
                nl = self.buf.find(b"\n", self.pos)
                self.pos = len(self.buf) if nl < 0 else nl + 1
            elif b and b in _WS:
                self.pos += 1
            else:
                return

    def token(self, what: str) -> bytes:
        self._skip_space_and_comments()
        start = self.pos
        while self.pos < len(self.buf) and self.buf[self.pos : self.pos + 1] not in _WS:
            self.pos += 1
        if self.pos == start:
            raise DataError(f"missing {what} in header", start)
        return self.buf[start : self.pos]

    def number(self, what: str) -> int:
        at = self.pos
        tok = self.token(what)
        if not tok.isdigit():
            raise DataError(f"{what} is not a decimal number: {tok[:16]!r}", at)
        return int(tok)


def _read_pnm(path: str | Path, magic: bytes, channels: int) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    s = _HeaderScanner(buf)
    got = s.token("magic")
    if got != magic:
        raise DataError(f"bad magic {got[:8]!r}, want {magic.decode()}", 0)
    w = s.number("width")
    h = s.number("height")
    maxval = s.number("maxval")
    if w < 1 or h < 1:
        raise DataError(f"bad dimensions {w}x{h}", 0)
    if maxval != 255:
        raise DataError(f"unsupported maxval {maxval}, only 255", 0)
    if s.pos >= len(buf) or buf[s.pos : s.pos + 1] not in _WS:
        raise DataError("missing whitespace after maxval", s.pos)
    s.pos += 1
    need = w * h * channels
    raw = buf[s.pos : s.pos + need]
    if len(raw) != need:
        raise DataError(
            f"truncated pixel data: need {need} bytes, have {len(raw)}", s.pos + len(raw)
        )
    arr = np.frombuffer(raw, dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def read_ppm(path: str | Path) -> np.ndarray:
    """[h, w, 3] uint8."""
    return _read_pnm(path, b"P6", 3)


def read_pgm(path: str | Path) -> np.ndarray:
    """[h, w] uint8."""
    return _read_pnm(path, b"P5", 1)


def _check_u8(arr: np.ndarray, rank: int, what: str) -> np.ndarray:
    a = np.asarray(arr)
    if a.ndim != rank:
        raise DataError(f"{what} must have rank {rank}, got shape {a.shape}")
    if a.dtype != np.uint8:
        if not np.issubdtype(a.dtype, np.integer) or a.min() < 0 or a.max() > 255:
            raise DataError(f"{what} must be uint8 values in [0, 255]")
        a = a.astype(np.uint8)
    return a


def write_ppm(path: str | Path, pixels: np.ndarray) -> None:
    a = _check_u8(pixels, 3, "PPM pixels")
    if a.shape[2] != 3:
        raise DataError(f"PPM pixels must be [h, w, 3], got {a.shape}")
    h, w, _ = a.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + a.tobytes())


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    a = _check_u8(pixels, 2, "PGM pixels")
    h, w = a.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + a.tobytes())
