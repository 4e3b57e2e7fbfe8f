"""Canonical binary encoding shared by certificates, transactions, and blocks.

Every multi-byte integer is big-endian. Variable-length fields carry a
4-byte length prefix; 32-byte digests are written raw. The encoding is
canonical: each value has exactly one serialization and decoders reject
trailing bytes, so byte equality is value equality.
"""

from __future__ import annotations

import hashlib
import json
from fractions import Fraction
from typing import Any

DIGEST_SIZE = 32
ZERO_DIGEST = b"\x00" * DIGEST_SIZE

_U32_MAX = 2**32 - 1
_U64_MAX = 2**64 - 1


class DecodeError(ValueError):
    """Bytes do not parse as a canonical record."""


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def u32(n: int) -> bytes:
    if not 0 <= n <= _U32_MAX:
        raise ValueError(f"u32 out of range: {n}")
    return n.to_bytes(4, "big")


def u64(n: int) -> bytes:
    if not 0 <= n <= _U64_MAX:
        raise ValueError(f"u64 out of range: {n}")
    return n.to_bytes(8, "big")


def lp(data: bytes) -> bytes:
    """Length-prefixed bytes field."""
    return u32(len(data)) + data


def text(s: str) -> bytes:
    return lp(s.encode("utf-8"))


class Reader:
    """Strict sequential decoder over one canonical record."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos

    def take(self, n: int) -> bytes:
        if n < 0 or self.remaining < n:
            raise DecodeError(f"need {n} bytes, have {self.remaining}")
        out = self._data[self._pos : self._pos + n]
        self._pos += n
        return out

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "big")

    def u64(self) -> int:
        return int.from_bytes(self.take(8), "big")

    def lp_bytes(self) -> bytes:
        return self.take(self.u32())

    def text(self) -> str:
        raw = self.lp_bytes()
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"invalid utf-8 in text field: {exc}") from exc

    def digest(self) -> bytes:
        return self.take(DIGEST_SIZE)

    def done(self) -> None:
        if self.remaining:
            raise DecodeError(f"{self.remaining} trailing bytes")


def canonical_json(obj: Any) -> bytes:
    """JSON with sorted keys and no whitespace; stable across runs."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("utf-8")


def frac_to_str(f: Fraction) -> str:
    return f"{f.numerator}/{f.denominator}"


def frac_from_str(s: str) -> Fraction:
    num, _, den = s.partition("/")
    return Fraction(int(num), int(den) if den else 1)
