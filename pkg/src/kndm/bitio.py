"""Bit-level and varint I/O primitives shared by the coding layers."""

from __future__ import annotations

import struct


class CorruptStream(ValueError):
    """Raised when a byte stream cannot be parsed; carries the byte offset."""

    def __init__(self, message: str, offset: int = -1):
        super().__init__(f"{message} (byte offset {offset})" if offset >= 0 else message)
        self.offset = offset


class BitWriter:
    """Accumulates bits most-significant-bit first into a byte buffer."""

    def __init__(self) -> None:
        self._buf = bytearray()
        self._acc = 0
        self._nbits = 0

    def write_bit(self, bit: int) -> None:
        self._acc = (self._acc << 1) | (bit & 1)
        self._nbits += 1
        if self._nbits == 8:
            self._buf.append(self._acc)
            self._acc = 0
            self._nbits = 0

    def write_bits(self, value: int, count: int) -> None:
        for i in range(count - 1, -1, -1):
            self.write_bit((value >> i) & 1)

    @property
    def bit_length(self) -> int:
        return 8 * len(self._buf) + self._nbits

    def getvalue(self) -> bytes:
        """Return the buffer padded with zero bits to a byte boundary."""
        out = bytearray(self._buf)
        if self._nbits:
            out.append(self._acc << (8 - self._nbits))
        return bytes(out)


class BitReader:
    """Reads bits most-significant-bit first from a byte buffer."""

    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0  # bit position

    @property
    def bits_left(self) -> int:
        return 8 * len(self._data) - self._pos

    @property
    def bit_position(self) -> int:
        return self._pos

    def read_bit(self) -> int:
        if self._pos >= 8 * len(self._data):
            raise CorruptStream("bit stream exhausted", self._pos // 8)
        byte = self._data[self._pos >> 3]
        bit = (byte >> (7 - (self._pos & 7))) & 1
        self._pos += 1
        return bit

    def read_bits(self, count: int) -> int:
        value = 0
        for _ in range(count):
            value = (value << 1) | self.read_bit()
        return value


def write_uvarint(out: bytearray, value: int) -> None:
    """Append an unsigned integer as 7-bit groups with a continuation bit."""
    if value < 0:
        raise ValueError(f"uvarint requires a nonnegative value, got {value}")
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


def read_uvarint(data: bytes, pos: int) -> tuple[int, int]:
    """Decode an unsigned varint at ``pos``; returns (value, next position)."""
    value = 0
    shift = 0
    start = pos
    while True:
        if pos >= len(data):
            raise CorruptStream("truncated varint", start)
        byte = data[pos]
        pos += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, pos
        shift += 7
        if shift > 63:
            raise CorruptStream("varint too long", start)


def zigzag_encode(value: int) -> int:
    return (value << 1) ^ (value >> 63) if value < 0 else value << 1


def zigzag_decode(value: int) -> int:
    return (value >> 1) ^ -(value & 1)


def pack_u32(value: int) -> bytes:
    return struct.pack("<I", value)


def unpack_u32(data: bytes, pos: int) -> tuple[int, int]:
    if pos + 4 > len(data):
        raise CorruptStream("truncated u32 field", pos)
    return struct.unpack_from("<I", data, pos)[0], pos + 4


def pack_f32(value: float) -> bytes:
    return struct.pack("<f", value)


def unpack_f32(data: bytes, pos: int) -> tuple[float, int]:
    if pos + 4 > len(data):
        raise CorruptStream("truncated f32 field", pos)
    return struct.unpack_from("<f", data, pos)[0], pos + 4


def take(data: bytes, pos: int, count: int) -> tuple[bytes, int]:
    """Slice ``count`` bytes with bounds checking."""
    if count < 0 or pos + count > len(data):
        raise CorruptStream(f"section of {count} bytes overruns stream", pos)
    return data[pos:pos + count], pos + count
