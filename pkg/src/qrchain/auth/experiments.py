"""Statistical checks of the tag construction on reduced fields.

These run the real field arithmetic in bulk (numpy) rather than shortcutting
to closed forms, and are cross-checked against the scalar path in tests.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .gf import field
from .wc import forgery_bound


@dataclass(frozen=True)
class ForgeryResult:
    trials: int
    successes: int
    bound: Fraction
    strategy: str

    @property
    def rate(self) -> float:
        return self.successes / self.trials

    @property
    def ratio_to_bound(self) -> float:
        return self.rate / float(self.bound)


def _length_column(n: int, data_blocks: int, bits: int) -> np.ndarray:
    return np.full((n, 1), data_blocks * bits, dtype=np.int64)


def _planted_difference(f, rng: np.random.Generator, n: int, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients of prod_{i<t} (k + r_i) for random roots r_i.

    Returns (coeffs[:, 1..t], c0).  Choosing the message difference as the
    higher coefficients and the tag offset as c0 makes the forgery succeed
    exactly when the secret key is one of the planted roots.
    """
    size = 1 << f.bits
    coeffs = np.zeros((n, t + 1), dtype=np.int64)
    coeffs[:, 0] = 1
    for _ in range(t):
        r = rng.integers(0, size, n, dtype=np.int64)
        nxt = np.zeros_like(coeffs)
        nxt[:, 1:] = coeffs[:, :-1]
        nxt ^= f.mul_vec(coeffs, r[:, None])
        coeffs = nxt
    return coeffs[:, 1:], coeffs[:, 0]


def substitution_forgery(bits: int = 16, trials: int = 10**6, data_blocks: int = 4,
                         strategy: str = "planted", seed: int = 0,
                         chunk: int = 10**6) -> ForgeryResult:
    """Attacker sees (m, tag) under fresh keys and submits (m', tag') with m' != m.

    ``random``: m' and the tag offset are uniform.  ``planted``: the message
    difference is a polynomial with ``data_blocks`` planted roots, which is the
    best substitution strategy against polynomial hashing.
    """
    if strategy not in ("random", "planted"):
        raise ValueError("strategy must be 'random' or 'planted'")
    f = field(bits)
    size = 1 << bits
    rng = np.random.default_rng(seed)
    wins = 0
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        k = rng.integers(0, size, n, dtype=np.int64)
        otp = rng.integers(0, size, n, dtype=np.int64)
        m = rng.integers(0, size, (n, data_blocks), dtype=np.int64)
        length = _length_column(n, data_blocks, bits)
        tag = f.horner_vec(k, np.hstack([m, length])) ^ otp
        if strategy == "random":
            diff = rng.integers(0, size, (n, data_blocks), dtype=np.int64)
            zero = ~diff.any(axis=1)
            diff[zero, 0] = 1  # m' must differ from m
            offset = rng.integers(0, size, n, dtype=np.int64)
        else:
            diff, offset = _planted_difference(f, rng, n, data_blocks)
        forged = f.horner_vec(k, np.hstack([m ^ diff, length])) ^ otp
        wins += int(np.count_nonzero(forged == (tag ^ offset)))
        done += n
    # degree of the difference polynomial is data_blocks (length block cancels)
    return ForgeryResult(trials, wins, forgery_bound(bits, data_blocks), strategy)


@dataclass(frozen=True)
class AxuCheck:
    samples: int
    worst_count: int
    worst_degree: int
    violations: int

    @property
    def worst_probability(self) -> Fraction:
        return Fraction(self.worst_count, 256)


def exhaustive_axu_gf256(samples: int = 1000, max_bytes: int = 12, seed: int = 0) -> AxuCheck:
    """For random (m, m', delta), count all 256 keys with h(m) ^ h(m') == delta.

    The count may not exceed the number of polynomial terms of the longer
    message (data blocks plus the length block).
    """
    from .wc import message_blocks

    f = field(8)
    rng = np.random.default_rng(seed)
    keys = np.arange(256, dtype=np.int64)
    worst = (0, 1)
    violations = 0
    for _ in range(samples):
        la, lb = (int(x) for x in rng.integers(1, max_bytes + 1, 2))
        a = rng.integers(0, 256, la, dtype=np.uint8).tobytes()
        b = rng.integers(0, 256, lb, dtype=np.uint8).tobytes()
        if a == b:
            b = bytes([b[0] ^ 1]) + b[1:]
        delta = int(rng.integers(0, 256))
        ba, bb = message_blocks(a, 8), message_blocks(b, 8)
        ha = f.horner_vec(keys, np.tile(np.array(ba, dtype=np.int64), (256, 1)))
        hb = f.horner_vec(keys, np.tile(np.array(bb, dtype=np.int64), (256, 1)))
        count = int(np.count_nonzero((ha ^ hb) == delta))
        degree = max(len(ba), len(bb))
        if count > degree:
            violations += 1
        if Fraction(count, degree) > Fraction(*worst):
            worst = (count, degree)
    return AxuCheck(samples, worst[0], worst[1], violations)


@dataclass(frozen=True)
class FramingResult:
    attempts: int
    accepted: int
    epsilon: Fraction

    @property
    def ceiling(self) -> float:
        """Expected acceptances under the bound plus three standard deviations."""
        e = float(self.epsilon)
        return self.attempts * e + 3.0 * (self.attempts * e * (1 - e)) ** 0.5


def framing_attempts(bits: int = 16, attempts: int = 10**6, data_blocks: int = 4,
                     seed: int = 0, chunk: int = 10**6) -> FramingResult:
    """A receiver j rewrites an observed transaction and adjusts another peer's slot.

    j knows its own pair key with the sender and sees the full honest vector.
    Its best slot offset for peer v is the hash difference under its own key;
    the forgery is accepted by v only if v's independent key gives the same
    difference.
    """
    f = field(bits)
    size = 1 << bits
    rng = np.random.default_rng(seed)
    accepted = 0
    done = 0
    while done < attempts:
        n = min(chunk, attempts - done)
        k_j = rng.integers(0, size, n, dtype=np.int64)
        k_v = rng.integers(0, size, n, dtype=np.int64)
        otp_v = rng.integers(0, size, n, dtype=np.int64)
        m = rng.integers(0, size, (n, data_blocks), dtype=np.int64)
        diff = rng.integers(0, size, (n, data_blocks), dtype=np.int64)
        diff[~diff.any(axis=1), 0] = 1
        length = _length_column(n, data_blocks, bits)
        m2 = np.hstack([m ^ diff, length])
        m1 = np.hstack([m, length])
        slot_v = f.horner_vec(k_v, m1) ^ otp_v
        guess = slot_v ^ f.horner_vec(k_j, m1) ^ f.horner_vec(k_j, m2)
        truth = f.horner_vec(k_v, m2) ^ otp_v
        accepted += int(np.count_nonzero(guess == truth))
        done += n
    return FramingResult(attempts, accepted, forgery_bound(bits, data_blocks))
