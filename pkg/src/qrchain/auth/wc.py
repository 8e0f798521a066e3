"""Wegman-Carter tags: polynomial hash over GF(2^S) masked by a one-time pad.

Hashed input is ``M || ctr`` with the counter as 64-bit big-endian.  The
message is cut into S-bit big-endian blocks, the last one zero-padded on the
right, and a final block holding the bit length of the input is appended, so
the hash is sum(m_i * k^i) for i = 1..t+1.
"""
from __future__ import annotations

import hmac
import struct
import threading
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping

from ..errors import KeyExhausted, OneTimeViolation
from .gf import SUPPORTED_BITS, field

MAX_MESSAGE_BITS = 1 << 20
CTR_BYTES = 8


def max_message_bits(bits: int) -> int:
    # the length block must be representable in one field element
    return min(MAX_MESSAGE_BITS, (1 << bits) - 1)


def _check_bits(bits: int) -> None:
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"tag size must be one of {SUPPORTED_BITS}")


@dataclass(frozen=True)
class HashKey:
    value: int
    bits: int = 64

    def __post_init__(self) -> None:
        _check_bits(self.bits)
        if not 0 <= self.value < 1 << self.bits:
            raise ValueError("hash key out of range")

    def __repr__(self) -> str:
        return f"HashKey(bits={self.bits})"


class OtpKey:
    """One-time pad word.  Reading it for tag generation erases it."""

    __slots__ = ("bits", "_value", "_consumed", "_lock")

    def __init__(self, value: int, bits: int = 64) -> None:
        _check_bits(bits)
        if not 0 <= value < 1 << bits:
            raise ValueError("OTP key out of range")
        self.bits = bits
        self._value: int | None = value
        self._consumed = False
        self._lock = threading.Lock()

    @property
    def consumed(self) -> bool:
        return self._consumed

    @property
    def value(self) -> int:
        """Read without consuming (verifier side)."""
        v = self._value
        if v is None:
            raise OneTimeViolation("OTP key already consumed")
        return v

    def consume(self) -> int:
        with self._lock:
            if self._consumed:
                raise OneTimeViolation("OTP key already consumed")
            v = self._value
            self._value = None
            self._consumed = True
        return v  # type: ignore[return-value]

    def __repr__(self) -> str:
        return f"OtpKey(bits={self.bits}, consumed={self._consumed})"


@dataclass(frozen=True)
class AuthTag:
    value: int
    bits: int = 64

    def to_bytes(self) -> bytes:
        return self.value.to_bytes(self.bits // 8, "big")

    @classmethod
    def from_bytes(cls, data: bytes) -> "AuthTag":
        return cls(int.from_bytes(data, "big"), len(data) * 8)


def message_blocks(message: bytes, bits: int) -> list[int]:
    nbits = len(message) * 8
    if nbits > max_message_bits(bits):
        raise ValueError(f"message of {nbits} bits exceeds the {max_message_bits(bits)}-bit limit")
    width = bits // 8
    pad = -len(message) % width
    if pad:
        message += bytes(pad)
    fmt = _UNPACK.get(width)
    if fmt is not None:
        blocks = list(struct.unpack(f">{len(message) // width}{fmt}", message))
    else:
        blocks = [int.from_bytes(message[off:off + width], "big") for off in range(0, len(message), width)]
    blocks.append(nbits)
    return blocks


_UNPACK = {1: "B", 2: "H", 4: "I", 8: "Q"}


def axu_hash(k: HashKey, message: bytes) -> int:
    return field(k.bits).horner(k.value, message_blocks(message, k.bits))


def tagged_message(message: bytes, ctr: int) -> bytes:
    return message + ctr.to_bytes(CTR_BYTES, "big")


def _hash_with_ctr(k_hash: HashKey, message: bytes, ctr: int) -> int:
    return axu_hash(k_hash, tagged_message(message, ctr))


def make_tag(k_hash: HashKey, k_otp: OtpKey, message: bytes, ctr: int) -> AuthTag:
    if k_hash.bits != k_otp.bits:
        raise ValueError("hash key and OTP key sizes differ")
    if k_otp.consumed:
        raise OneTimeViolation("OTP key already consumed")
    h = _hash_with_ctr(k_hash, message, ctr)
    return AuthTag(h ^ k_otp.consume(), k_hash.bits)


def verify_tag(k_hash: HashKey, k_otp: OtpKey, message: bytes, ctr: int,
               tag: AuthTag | int) -> bool:
    bits = k_hash.bits
    if isinstance(tag, AuthTag):
        if tag.bits != bits:
            return False
        value = tag.value
    else:
        value = tag
    if not 0 <= value < 1 << bits:
        return False
    expected = _hash_with_ctr(k_hash, message, ctr) ^ k_otp.value
    width = bits // 8
    return hmac.compare_digest(expected.to_bytes(width, "big"), value.to_bytes(width, "big"))


def tag_from_values(k_hash: int, k_otp: int, message: bytes, ctr: int, bits: int) -> int:
    """Recompute a tag from raw disclosed key values (public audit path)."""
    return _hash_with_ctr(HashKey(k_hash, bits), message, ctr) ^ k_otp


@dataclass(frozen=True)
class AuthVector:
    sender: int
    tags: tuple[int, ...]
    bits: int = 64

    def __post_init__(self) -> None:
        if not 0 <= self.sender < len(self.tags):
            raise ValueError("sender index outside the vector")

    @property
    def n(self) -> int:
        return len(self.tags)

    def tag_for(self, j: int) -> AuthTag:
        return AuthTag(self.tags[j], self.bits)

    def well_formed(self) -> bool:
        return self.tags[self.sender] == 0

    def to_bytes(self) -> bytes:
        width = self.bits // 8
        return self.sender.to_bytes(4, "big") + b"".join(t.to_bytes(width, "big") for t in self.tags)

    @classmethod
    def from_bytes(cls, data: bytes, n: int, bits: int = 64) -> "AuthVector":
        width = bits // 8
        if len(data) != 4 + n * width:
            raise ValueError("vector encoding has the wrong length")
        sender = int.from_bytes(data[:4], "big")
        tags = tuple(int.from_bytes(data[4 + i * width:4 + (i + 1) * width], "big") for i in range(n))
        return cls(sender, tags, bits)


def build_vector(sender_index: int, n: int,
                 peer_keys: Mapping[int, tuple[HashKey, OtpKey]],
                 message: bytes, ctr: int, bits: int = 64) -> AuthVector:
    peers = [j for j in range(n) if j != sender_index]
    missing = [j for j in peers if j not in peer_keys]
    if missing:
        raise KeyExhausted(f"no key pair for peers {missing}")
    if any(peer_keys[j][1].consumed for j in peers):
        raise OneTimeViolation("a supplied OTP key is already consumed")
    for j in peers:
        kh, ko = peer_keys[j]
        if kh.bits != bits or ko.bits != bits:
            raise ValueError("key size does not match the vector tag size")
    # every slot hashes the same input, so it is split into blocks once
    blocks = message_blocks(tagged_message(message, ctr), bits)
    gf = field(bits)
    tags = [0] * n
    for j in peers:
        kh, ko = peer_keys[j]
        tags[j] = gf.horner(kh.value, blocks) ^ ko.consume()
    return AuthVector(sender_index, tuple(tags), bits)


def verify_slot(vector: AuthVector, verifier: int, k_hash: HashKey, k_otp: OtpKey,
                message: bytes, ctr: int) -> bool:
    if verifier == vector.sender or not 0 <= verifier < vector.n:
        return False
    return verify_tag(k_hash, k_otp, message, ctr, vector.tag_for(verifier))


def forgery_bound(S_key: int, message_length: int) -> Fraction:
    """Substitution-forgery probability bound L / 2^S, as an exact rational."""
    if S_key < 1 or message_length < 1:
        raise ValueError("S_key and message length must be positive")
    return Fraction(message_length, 1 << S_key)
