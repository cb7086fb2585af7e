"""Low-level helpers for the little-endian binary file formats.

All multi-byte integers and floats are little-endian; arrays are stored as
contiguous raw values. The same reader/writer pair backs the SDAT, SCPD and
SCAL containers plus the canonical byte forms used for fingerprinting.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .errors import InputError

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash of a byte string."""
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


class Writer:
    def __init__(self):
        self._buf = io.BytesIO()

    def magic(self, tag: bytes):
        assert len(tag) == 4
        self._buf.write(tag)

    def u8(self, v: int):
        self._buf.write(struct.pack("<B", v))

    def u32(self, v: int):
        self._buf.write(struct.pack("<I", v))

    def u64(self, v: int):
        self._buf.write(struct.pack("<Q", v))

    def i64(self, v: int):
        self._buf.write(struct.pack("<q", v))

    def f64(self, v: float):
        self._buf.write(struct.pack("<d", v))

    def array(self, a: np.ndarray, dtype: str = "<f8"):
        self._buf.write(np.ascontiguousarray(a, dtype=dtype).tobytes())

    def getvalue(self) -> bytes:
        return self._buf.getvalue()


class Reader:
    def __init__(self, data: bytes):
        self._buf = io.BytesIO(data)

    def magic(self, expected: bytes):
        got = self._buf.read(4)
        if got != expected:
            raise InputError(
                f"bad magic: expected {expected!r}, got {got!r}"
            )

    def _unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        raw = self._buf.read(size)
        if len(raw) != size:
            raise InputError("truncated file")
        return struct.unpack(fmt, raw)[0]

    def u8(self) -> int:
        return self._unpack("<B")

    def u32(self) -> int:
        return self._unpack("<I")

    def u64(self) -> int:
        return self._unpack("<Q")

    def i64(self) -> int:
        return self._unpack("<q")

    def f64(self) -> float:
        return self._unpack("<d")

    def array(self, count: int, dtype: str = "<f8") -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        raw = self._buf.read(itemsize * count)
        if len(raw) != itemsize * count:
            raise InputError("truncated file")
        return np.frombuffer(raw, dtype=dtype).copy()
