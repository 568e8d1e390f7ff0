"""Little-endian binary envelope: 4-byte magic, u32 version, payload, u32 CRC32.

The CRC covers every byte before it.
"""
from __future__ import annotations

import struct
import zlib

import numpy as np

from .imageio import atomic_write_bytes

_HEAD = struct.Struct("<4sI")
_CRC = struct.Struct("<I")


class FormatError(ValueError):
    """A file failed validation; ``field`` names the first offending part."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def seal(magic: bytes, version: int, payload: bytes) -> bytes:
    body = _HEAD.pack(magic, version) + payload
    return body + _CRC.pack(zlib.crc32(body))


def open_envelope(data: bytes, magic: bytes, versions) -> tuple[int, bytes]:
    """Validate magic, version and CRC; return (version, payload)."""
    if len(data) < _HEAD.size + _CRC.size:
        raise FormatError("length", f"file is {len(data)} bytes, too short for a header")
    found, version = _HEAD.unpack_from(data)
    if found != magic:
        raise FormatError("magic", f"expected {magic!r}, found {found!r}")
    if version not in versions:
        raise FormatError("version", f"unsupported format version {version}")
    (stored,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    if zlib.crc32(data[:-_CRC.size]) != stored:
        raise FormatError("crc", "checksum mismatch")
    return version, data[_HEAD.size:-_CRC.size]


def write_sealed(path, magic: bytes, version: int, payload: bytes) -> None:
    atomic_write_bytes(path, seal(magic, version, payload))


class Reader:
    """Cursor over a payload that names the field being read when it runs dry."""

    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def _take(self, n: int, field: str) -> memoryview:
        if self.pos + n > len(self.data):
            raise FormatError(field, f"truncated (needs {n} bytes at offset {self.pos})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self, field: str) -> int:
        return self._take(1, field)[0]

    def u32(self, field: str) -> int:
        return struct.unpack("<I", self._take(4, field))[0]

    def u64(self, field: str) -> int:
        return struct.unpack("<Q", self._take(8, field))[0]

    def f32_array(self, shape, field: str) -> np.ndarray:
        n = int(np.prod(shape))
        buf = self._take(4 * n, field)
        return np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)

    def expect_end(self, field: str = "payload") -> None:
        if self.pos != len(self.data):
            raise FormatError(field, f"{len(self.data) - self.pos} unexpected trailing bytes")


def u8(v: int) -> bytes:
    return struct.pack("<B", v)


def u32(v: int) -> bytes:
    return struct.pack("<I", v)


def u64(v: int) -> bytes:
    return struct.pack("<Q", v)


def f32(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()
