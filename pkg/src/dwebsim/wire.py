"""Canonical binary encoding shared by fingerprints, the ledger and chain sync.

Variable-length fields are length-prefixed and integers are fixed-width
big-endian, so every encoding is injective and byte-stable across runs and
platforms.
"""
from __future__ import annotations

import struct


def u8(value: int) -> bytes:
    return struct.pack(">B", value)


def u32(value: int) -> bytes:
    return struct.pack(">I", value)


def u64(value: int) -> bytes:
    return struct.pack(">Q", value)


def blob(data: bytes) -> bytes:
    return u32(len(data)) + data


def text(value: str) -> bytes:
    return blob(value.encode("utf-8"))


class Reader:
    """Sequential decoder over one buffer; raises ValueError on truncation."""

    __slots__ = ("_buf", "_pos")

    def __init__(self, buf: bytes):
        self._buf = buf
        self._pos = 0

    def take(self, n: int) -> bytes:
        end = self._pos + n
        if end > len(self._buf):
            raise ValueError("truncated stream")
        out = self._buf[self._pos:end]
        self._pos = end
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())

    def text(self) -> str:
        return self.blob().decode("utf-8")

    def eof(self) -> bool:
        return self._pos == len(self._buf)
