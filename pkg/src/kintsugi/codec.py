"""Canonical little-endian byte encoding primitives.

Integers are fixed-width little-endian, byte strings and text carry a
4-byte length prefix, lists a 4-byte count. Readers raise
:class:`MalformedMessage` with the offset where parsing failed.
"""

from __future__ import annotations

import struct

from .errors import MalformedElement, MalformedMessage
from .group import Group, GroupElement, Scalar


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def u8(self, v: int) -> Writer:
        self._parts.append(struct.pack("<B", v))
        return self

    def u32(self, v: int) -> Writer:
        self._parts.append(struct.pack("<I", v))
        return self

    def u64(self, v: int) -> Writer:
        self._parts.append(struct.pack("<Q", v))
        return self

    def raw(self, b: bytes) -> Writer:
        self._parts.append(bytes(b))
        return self

    def bytes(self, b: bytes) -> Writer:
        return self.u32(len(b)).raw(b)

    def str(self, s: str) -> Writer:
        return self.bytes(s.encode("utf-8"))

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = memoryview(data)
        self.pos = offset

    def _take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise MalformedMessage(f"truncated: wanted {n} bytes", self.pos)
        out = bytes(self.data[self.pos : self.pos + n])
        self.pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def bytes(self) -> bytes:
        return self._take(self.u32())

    def str(self) -> str:
        start = self.pos
        b = self.bytes()
        try:
            return b.decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedMessage("invalid utf-8", start) from None

    def element(self, group: Group) -> GroupElement:
        start = self.pos
        try:
            return group.decode_element(self._take(group.element_size))
        except MalformedElement as exc:
            raise MalformedMessage(str(exc), start) from None

    def scalar(self, group: Group) -> Scalar:
        start = self.pos
        try:
            return group.decode_scalar(self._take(group.scalar_size))
        except MalformedElement as exc:
            raise MalformedMessage(str(exc), start) from None

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def done(self) -> None:
        if self.pos != len(self.data):
            raise MalformedMessage(f"{len(self.data) - self.pos} trailing bytes", self.pos)
