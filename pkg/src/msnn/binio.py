"""Little-endian binary container helpers shared by the epoch, record and
checkpoint file formats.

Every container follows the same discipline: a 4-byte magic, a u16 format
version, the payload, and a trailing CRC32 over everything before it.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np


class FormatError(Exception):
    """Base class for malformed container files."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class ByteWriter:
    def __init__(self) -> None:
        self._buf = bytearray()

    def raw(self, data: bytes) -> None:
        self._buf += data

    def u8(self, v: int) -> None:
        self._buf += struct.pack("<B", v)

    def u16(self, v: int) -> None:
        self._buf += struct.pack("<H", v)

    def u32(self, v: int) -> None:
        self._buf += struct.pack("<I", v)

    def u64(self, v: int) -> None:
        self._buf += struct.pack("<Q", v)

    def f64(self, v: float) -> None:
        self._buf += struct.pack("<d", v)

    def string(self, s: str) -> None:
        data = s.encode("utf-8")
        if len(data) > 0xFFFF:
            raise ValueError("string too long for u16 length prefix")
        self.u16(len(data))
        self.raw(data)

    def block(self, data: bytes) -> None:
        """u32 length-prefixed opaque block."""
        self.u32(len(data))
        self.raw(data)

    def f64_array(self, arr: np.ndarray) -> None:
        self.raw(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def finish_with_crc(self) -> bytes:
        """Append CRC32 of everything written so far and return the bytes."""
        crc = zlib.crc32(bytes(self._buf)) & 0xFFFFFFFF
        return bytes(self._buf) + struct.pack("<I", crc)


class ByteReader:
    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0

    @property
    def pos(self) -> int:
        return self._pos

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos

    def take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise TruncatedFileError(
                f"file truncated: need {n} bytes at offset {self._pos}, "
                f"have {len(self._data) - self._pos}"
            )
        out = self._data[self._pos : self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def string(self) -> str:
        n = self.u16()
        return self.take(n).decode("utf-8")

    def block(self) -> bytes:
        n = self.u32()
        return self.take(n)

    def f64_array(self, count: int) -> np.ndarray:
        raw = self.take(count * 8)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64, copy=True)


def check_magic_and_version(reader: ByteReader, magic: bytes, version: int) -> None:
    got = reader.take(len(magic))
    if got != magic:
        raise BadMagicError(f"bad magic: expected {magic!r}, found {got!r}")
    got_version = reader.u16()
    if got_version != version:
        raise UnsupportedVersionError(
            f"unsupported format version {got_version} (expected {version})"
        )


def verify_trailing_crc(data: bytes) -> bytes:
    """Split off and verify the trailing CRC32; return the body bytes."""
    if len(data) < 4:
        raise TruncatedFileError("file shorter than its checksum field")
    body, stored = data[:-4], struct.unpack("<I", data[-4:])[0]
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if stored != actual:
        raise ChecksumError(
            f"checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"
        )
    return body
