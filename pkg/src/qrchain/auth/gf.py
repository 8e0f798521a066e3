"""Arithmetic in GF(2^m) for the tag sizes the authenticator supports.

Elements are Python ints.  Scalar multiplication by a fixed hash key uses a
4-bit window table built once per key, which is what the polynomial hash
needs.  Fields of at most 16 bits also get log/antilog tables so numpy arrays
of elements can be multiplied in bulk (Monte-Carlo and exhaustive checks).
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

# Reduction polynomials, full form including the leading x^m term.
REDUCTION_POLY = {
    8: (1 << 8) | 0x1B,                     # x^8 + x^4 + x^3 + x + 1
    16: (1 << 16) | (1 << 12) | 0x0B,       # x^16 + x^12 + x^3 + x + 1
    32: (1 << 32) | 0x8D,                   # x^32 + x^7 + x^3 + x^2 + 1
    64: (1 << 64) | 0x1B,                   # x^64 + x^4 + x^3 + x + 1
    128: (1 << 128) | 0x87,                 # x^128 + x^7 + x^2 + x + 1
}
SUPPORTED_BITS = tuple(sorted(REDUCTION_POLY))


class BinaryField:
    def __init__(self, bits: int, poly: int) -> None:
        if poly >> bits != 1:
            raise ValueError("reduction polynomial must have degree equal to the field size")
        self.bits = bits
        self.poly = poly
        self.mask = (1 << bits) - 1
        low = poly & self.mask
        self._fold_shifts = tuple(i for i in range(bits) if low >> i & 1)
        self._nibbles = tuple(range(bits - 4, -4, -4))
        self._exp: np.ndarray | None = None
        self._log: np.ndarray | None = None

    def __repr__(self) -> str:
        return f"BinaryField(bits={self.bits}, poly={self.poly:#x})"

    def reduce(self, p: int) -> int:
        m, mask, shifts = self.bits, self.mask, self._fold_shifts
        while p >> m:
            hi = p >> m
            p &= mask
            for s in shifts:
                p ^= hi << s
        return p

    def mul(self, a: int, b: int) -> int:
        """Plain shift-and-add product; the reference the fast paths are checked against."""
        r = 0
        while b:
            if b & 1:
                r ^= a
            b >>= 1
            a <<= 1
            if a >> self.bits:
                a ^= self.poly
        return r

    def pow(self, a: int, e: int) -> int:
        r = 1
        while e:
            if e & 1:
                r = self.mul(r, a)
            a = self.mul(a, a)
            e >>= 1
        return r

    def window_table(self, k: int) -> list[int]:
        """Unreduced products k*n for every 4-bit n."""
        t = [0] * 16
        t[1] = k
        for i in range(2, 16, 2):
            t[i] = t[i >> 1] << 1
            t[i + 1] = t[i] ^ k
        return t

    def mul_table(self, a: int, table: list[int]) -> int:
        r = 0
        for s in range(self.bits - 4, -4, -4):
            r = (r << 4) ^ table[(a >> s) & 15]
        return self.reduce(r)

    def horner(self, k: int, blocks: list[int]) -> int:
        """sum(blocks[i] * k^(i+1)), evaluated from the highest power down."""
        if k == 0:
            return 0
        table = self.window_table(k)
        m_bits, mask, shifts, nibbles = self.bits, self.mask, self._fold_shifts, self._nibbles
        acc = 0
        for m in reversed(blocks):
            # mul_table and reduce inlined: this loop is the hot path of every tag
            a = acc ^ m
            r = 0
            for s in nibbles:
                r = (r << 4) ^ table[(a >> s) & 15]
            while r >> m_bits:
                hi = r >> m_bits
                r &= mask
                for s in shifts:
                    r ^= hi << s
            acc = r
        return acc

    # -- bulk arithmetic for small fields ------------------------------------

    def _tables(self) -> tuple[np.ndarray, np.ndarray]:
        if self.bits > 16:
            raise ValueError("vectorized arithmetic is limited to fields of at most 16 bits")
        if self._exp is None:
            order = self.mask
            g = _generator(self)
            exp = np.zeros(2 * order, dtype=np.int64)
            log = np.zeros(order + 1, dtype=np.int64)
            x = 1
            table = self.window_table(g)
            for i in range(order):
                exp[i] = x
                log[x] = i
                x = self.mul_table(x, table)
            exp[order:] = exp[:order]
            self._exp, self._log = exp, log
        return self._exp, self._log

    def mul_vec(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        exp, log = self._tables()
        a = np.asarray(a, dtype=np.int64)
        b = np.asarray(b, dtype=np.int64)
        out = exp[log[a] + log[b]]
        return np.where((a == 0) | (b == 0), 0, out)

    def horner_vec(self, k: np.ndarray, blocks: np.ndarray) -> np.ndarray:
        """Row-wise polynomial hash: blocks has shape (n, t), k has shape (n,)."""
        blocks = np.asarray(blocks, dtype=np.int64)
        acc = np.zeros(blocks.shape[0], dtype=np.int64)
        for j in range(blocks.shape[1] - 1, -1, -1):
            acc = self.mul_vec(acc ^ blocks[:, j], k)
        return acc


def _prime_factors(n: int) -> list[int]:
    out, d = [], 2
    while d * d <= n:
        if n % d == 0:
            out.append(d)
            while n % d == 0:
                n //= d
        d += 1
    if n > 1:
        out.append(n)
    return out


def _generator(f: BinaryField) -> int:
    order = f.mask
    factors = _prime_factors(order)
    for g in range(2, order + 1):
        if all(f.pow(g, order // q) != 1 for q in factors):
            return g
    raise ValueError("reduction polynomial is not irreducible")


@lru_cache(maxsize=None)
def field(bits: int) -> BinaryField:
    try:
        return BinaryField(bits, REDUCTION_POLY[bits])
    except KeyError:
        raise ValueError(f"unsupported field size {bits}; choose from {SUPPORTED_BITS}") from None
