"""Little-endian binary helpers for the model and feature file formats."""

import hashlib
import struct

import numpy as np

from .errors import FormatError


class Writer:
    def __init__(self, magic: bytes):
        self._parts = [magic]

    def u32(self, value: int) -> None:
        self._parts.append(struct.pack("<I", int(value)))

    def f64(self, array) -> None:
        self._parts.append(np.ascontiguousarray(array, dtype="<f8").tobytes())

    def raw(self, data: bytes) -> None:
        self._parts.append(bytes(data))

    def text(self, value: str) -> None:
        data = value.encode("utf-8")
        self.u32(len(data))
        self.raw(data)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes, magic: bytes, what: str = "file"):
        self._data = data
        self._pos = 0
        self._what = what
        if data[: len(magic)] != magic:
            raise FormatError(f"{what}: bad magic {data[:len(magic)]!r}, expected {magic!r}")
        self._pos = len(magic)

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise FormatError(f"{self._what}: truncated at byte {self._pos} (need {n} more)")
        chunk = self._data[self._pos : self._pos + n]
        self._pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def f64(self, *shape: int) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(self._take(8 * count), dtype="<f8").astype(np.float64)
        return arr.reshape(shape) if shape else arr

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def text(self) -> str:
        return self._take(self.u32()).decode("utf-8")

    def at_end(self) -> bool:
        return self._pos == len(self._data)

    def expect_end(self) -> None:
        if not self.at_end():
            raise FormatError(f"{self._what}: {len(self._data) - self._pos} trailing bytes")


def check_version(found: int, supported: int, what: str) -> None:
    if found != supported:
        raise FormatError(f"{what}: unsupported version {found} (expected {supported})")


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def short_hash(data: bytes) -> str:
    """64-bit content hash as 16 hex chars."""
    return hashlib.blake2b(data, digest_size=8).hexdigest()
