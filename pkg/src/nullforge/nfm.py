"""NFM1 binary matrix files.

Layout (all little-endian)::

    0..3    b"NFM1"
    4..7    uint32 version (1)
    8..15   uint64 rows
    16..23  uint64 cols
    24..    rows*cols float64, row-major
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .linalg import as_matrix

MAGIC = b"NFM1"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


class NfmFormatError(ValueError):
    """Malformed NFM1 payload; ``offset`` is the first byte that failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def encode(m) -> bytes:
    a = as_matrix(m)
    rows, cols = a.shape
    return _HEADER.pack(MAGIC, VERSION, rows, cols) + a.astype("<f8").tobytes(order="C")


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise NfmFormatError("bad magic, expected b'NFM1'", 0)
    if len(buf) < _HEADER.size:
        raise NfmFormatError("truncated header", len(buf))
    _, version, rows, cols = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise NfmFormatError(f"unsupported version {version}", 4)
    if rows < 1:
        raise NfmFormatError("row count must be positive", 8)
    if cols < 1:
        raise NfmFormatError("column count must be positive", 16)
    expected = _HEADER.size + 8 * rows * cols
    if len(buf) < expected:
        raise NfmFormatError(f"truncated payload: need {expected} bytes, have {len(buf)}", len(buf))
    if len(buf) > expected:
        raise NfmFormatError(f"trailing bytes after payload of {expected} bytes", expected)
    data = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(data))
    if bad.size:
        raise NfmFormatError("non-finite matrix entry", _HEADER.size + 8 * int(bad[0]))
    return data.astype(np.float64).reshape(rows, cols)


def write_nfm(path, m) -> None:
    """Write atomically: payload goes to a temp file that is then renamed."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(m))
    os.replace(tmp, path)


def read_nfm(path) -> np.ndarray:
    return decode(Path(path).read_bytes())
