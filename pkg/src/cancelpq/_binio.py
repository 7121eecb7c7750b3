"""Little-endian container helpers shared by every on-disk format."""

import struct

import numpy as np

from .exceptions import FormatError

VERSION = 1
DTYPE_F32 = 0
DTYPE_F64 = 1

_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_F64: np.dtype("<f8")}


def header(magic: bytes, dtype_code: int = DTYPE_F32) -> bytes:
    """magic(4) + version u8 + dtype u8 + 3 reserved bytes."""
    assert len(magic) == 4
    return magic + struct.pack("<BB3x", VERSION, dtype_code)


def u32(*values) -> bytes:
    return struct.pack(f"<{len(values)}I", *values)


def array_bytes(a, dtype) -> bytes:
    return np.ascontiguousarray(a, dtype=dtype).tobytes()


class Reader:
    """Cursor over a byte buffer; every failure names the offending offset."""

    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    @property
    def remaining(self):
        return len(self.data) - self.pos

    def take(self, n, what="payload"):
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"truncated {what}: need {n} bytes, have {self.remaining}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return bytes(chunk)

    def magic(self, expected: bytes):
        got = self.take(4, "magic")
        if got != expected:
            raise FormatError(f"bad magic {got!r}, expected {expected!r}", self.pos - 4)

    def header(self, expected: bytes):
        """Read a container header and return its dtype."""
        self.magic(expected)
        start = self.pos
        version, dtype_code, *reserved = struct.unpack("<BB3B", self.take(5, "header"))
        if any(reserved):
            bad = next(i for i, b in enumerate(reserved) if b)
            raise FormatError("reserved header bytes must be zero", start + 2 + bad)
        if version != VERSION:
            raise FormatError(f"unsupported version {version}", start)
        if dtype_code not in _DTYPES:
            raise FormatError(f"unknown dtype code {dtype_code}", start + 1)
        return _DTYPES[dtype_code]

    def u32(self, what="integer"):
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what="byte"):
        return self.take(1, what)[0]

    def f32(self, what="real"):
        return struct.unpack("<f", self.take(4, what))[0]

    def f64(self, what="real"):
        return struct.unpack("<d", self.take(8, what))[0]

    def array(self, shape, dtype, what="array", finite=False):
        dtype = np.dtype(dtype)
        count = int(np.prod(shape, dtype=np.int64)) if len(shape) else 1
        start = self.pos
        raw = self.take(count * dtype.itemsize, what)
        a = np.frombuffer(raw, dtype=dtype).reshape(shape)
        if finite and a.size and not np.all(np.isfinite(a)):
            bad = int(np.flatnonzero(~np.isfinite(a.ravel()))[0])
            raise FormatError(f"non-finite value in {what}", start + bad * dtype.itemsize)
        return a.copy()

    def end(self):
        if self.remaining:
            raise FormatError(f"{self.remaining} trailing bytes", self.pos)
