"""Little-endian binary helpers shared by the dataset and checkpoint formats."""
from __future__ import annotations

import struct

import numpy as np


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class Reader:
    """Cursor over an in-memory file; every read is bounds-checked first."""

    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    @property
    def remaining(self) -> int:
        return len(self.buf) - self.pos

    def take(self, n: int) -> memoryview:
        if n < 0 or n > self.remaining:
            raise TruncatedError(f"truncated payload: need {n} bytes at offset {self.pos}, {self.remaining} left")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize("<" + fmt)
        return struct.unpack("<" + fmt, self.take(size))

    def u8(self) -> int:
        return self.unpack("B")[0]

    def u32(self) -> int:
        return self.unpack("I")[0]

    def f64(self) -> float:
        return self.unpack("d")[0]

    def array(self, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = self.take(count * dt.itemsize)
        return np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="), copy=True)

    def expect_magic(self, magic: bytes):
        if self.remaining < len(magic) or bytes(self.buf[: len(magic)]) != magic:
            raise BadMagicError(f"bad magic: expected {magic!r}")
        self.pos += len(magic)


def pack(fmt: str, *values) -> bytes:
    return struct.pack("<" + fmt, *values)


def array_bytes(a: np.ndarray, dtype: str) -> bytes:
    return np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()
