"""Little-endian binary container helpers shared by dataset and checkpoint files."""

from __future__ import annotations

import struct
import zlib


class FormatError(Exception):
    """A binary file failed magic, version, or checksum validation."""


def pack_u8(v: int) -> bytes:
    return struct.pack("<B", v)


def pack_u16(v: int) -> bytes:
    return struct.pack("<H", v)


def pack_u32(v: int) -> bytes:
    return struct.pack("<I", v)


class Reader:
    """Sequential reader over a byte buffer with bounds checking."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file: wanted {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def remaining(self) -> int:
        return len(self.buf) - self.pos


def check_magic(reader: Reader, magic: bytes, kind: str) -> None:
    got = reader.take(len(magic))
    if got != magic:
        raise FormatError(f"not a {kind} file: bad magic {got!r}")


def check_crc(payload: bytes, stored: int, kind: str) -> None:
    actual = zlib.crc32(payload) & 0xFFFFFFFF
    if actual != stored:
        raise FormatError(f"{kind} checksum mismatch: stored {stored:#x}, computed {actual:#x}")


def crc32(payload: bytes) -> int:
    return zlib.crc32(payload) & 0xFFFFFFFF
