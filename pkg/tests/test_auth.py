from __future__ import annotations

import random
import threading
from fractions import Fraction

import numpy as np
import pytest
import sympy
from hypothesis import given, settings, strategies as st

from qrchain.auth import (
    REDUCTION_POLY,
    AuthTag,
    AuthVector,
    HashKey,
    OtpKey,
    axu_hash,
    build_vector,
    field,
    forgery_bound,
    make_tag,
    message_blocks,
    verify_slot,
    verify_tag,
)
from qrchain.auth.experiments import exhaustive_axu_gf256, framing_attempts, substitution_forgery
from qrchain.errors import KeyExhausted, OneTimeViolation

x = sympy.symbols("x")


@pytest.mark.parametrize("bits", sorted(REDUCTION_POLY))
def test_reduction_polynomial_irreducible(bits):
    poly = REDUCTION_POLY[bits]
    expr = sum(x ** i for i in range(bits + 1) if poly >> i & 1)
    assert sympy.Poly(expr, x, modulus=2).is_irreducible


@pytest.mark.parametrize("bits", [8, 16, 32, 64, 128])
def test_table_multiply_matches_reference(bits):
    f = field(bits)
    rng = random.Random(bits)
    for _ in range(300):
        a, b = rng.getrandbits(bits), rng.getrandbits(bits)
        assert f.mul_table(a, f.window_table(b)) == f.mul(a, b)


def test_gf256_known_product():
    # standard AES-field example: 0x57 * 0x83 = 0xC1
    assert field(8).mul(0x57, 0x83) == 0xC1


@pytest.mark.parametrize("bits", [8, 16])
def test_vectorized_multiply_matches_scalar(bits):
    f = field(bits)
    rng = np.random.default_rng(bits)
    a = rng.integers(0, 1 << bits, 2000)
    b = rng.integers(0, 1 << bits, 2000)
    a[:5] = 0
    got = f.mul_vec(a, b)
    assert [int(v) for v in got] == [f.mul(int(p), int(q)) for p, q in zip(a, b)]


def test_vectorized_hash_matches_scalar():
    f = field(16)
    rng = np.random.default_rng(3)
    keys = rng.integers(0, 1 << 16, 200)
    blocks = rng.integers(0, 1 << 16, (200, 5))
    vec = f.horner_vec(keys, blocks)
    for k, row, h in zip(keys, blocks, vec):
        assert f.horner(int(k), [int(b) for b in row]) == int(h)


@settings(max_examples=200)
@given(st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1))
def test_field_axioms_gf64(a, b, c):
    f = field(64)
    assert f.mul(a, b) == f.mul(b, a)
    assert f.mul(a, b ^ c) == f.mul(a, b) ^ f.mul(a, c)
    assert f.mul(f.mul(a, b), c) == f.mul(a, f.mul(b, c))
    assert f.mul(a, 1) == a


def test_zero_key_annihilates():
    for msg in (b"", b"a", b"hello world" * 20):
        assert axu_hash(HashKey(0), msg) == 0


def test_unit_key_xors_blocks():
    m = bytes(range(8))
    expected = int.from_bytes(m, "big") ^ 64
    assert axu_hash(HashKey(1), m) == expected


def test_blocks_padding_and_length():
    assert message_blocks(b"\x01", 16) == [0x0100, 8]
    assert message_blocks(b"", 64) == [0]
    assert len(message_blocks(b"x" * 17, 64)) == 4


def test_oversize_message_rejected():
    with pytest.raises(ValueError):
        axu_hash(HashKey(5), b"\0" * (2**17 + 1))
    with pytest.raises(ValueError):
        axu_hash(HashKey(5, 8), b"\0" * 32)  # 256 bits does not fit the 8-bit length block


def test_hash_blockwise_linearity():
    rng = random.Random(7)
    k = HashKey(rng.getrandbits(64))
    for _ in range(50):
        a, b = rng.getrandbits(64), rng.getrandbits(64)
        ma, mb = a.to_bytes(8, "big"), b.to_bytes(8, "big")
        mab = (a ^ b).to_bytes(8, "big")
        zero = bytes(8)
        assert axu_hash(k, ma) ^ axu_hash(k, mb) == axu_hash(k, mab) ^ axu_hash(k, zero)


def test_zero_hash_key_tag_is_pad():
    assert make_tag(HashKey(0), OtpKey(1234), b"anything", 9).value == 1234


def test_round_trip_and_rejections():
    rng = random.Random(1)
    kh, ko = rng.getrandbits(64), rng.getrandbits(64)
    msg = b"transfer 10 from 1 to 2"
    tag = make_tag(HashKey(kh), OtpKey(ko), msg, 5)
    assert verify_tag(HashKey(kh), OtpKey(ko), msg, 5, tag)
    assert not verify_tag(HashKey(kh), OtpKey(ko), msg, 6, tag)
    assert not verify_tag(HashKey(kh), OtpKey(ko), msg + b"!", 5, tag)
    for bit in range(64):
        flipped = AuthTag(tag.value ^ (1 << bit))
        assert not verify_tag(HashKey(kh), OtpKey(ko), msg, 5, flipped)
    assert not verify_tag(HashKey(kh), OtpKey(ko), msg, 5, AuthTag(tag.value, 32))


def test_otp_single_use():
    ko = OtpKey(99)
    make_tag(HashKey(3), ko, b"m", 0)
    assert ko.consumed
    with pytest.raises(OneTimeViolation):
        make_tag(HashKey(3), ko, b"m2", 1)
    with pytest.raises(OneTimeViolation):
        _ = ko.value


def test_otp_concurrent_consumption_single_winner():
    for _ in range(20):
        ko = OtpKey(5)
        wins, errors = [], []
        barrier = threading.Barrier(8)

        def grab():
            barrier.wait()
            try:
                wins.append(ko.consume())
            except OneTimeViolation:
                errors.append(1)

        threads = [threading.Thread(target=grab) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(wins) == 1 and len(errors) == 7


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(0, 9), st.binary(max_size=16)), max_size=40))
def test_random_call_sequences_never_reuse(calls):
    keys = [OtpKey(i + 1) for i in range(10)]
    used = set()
    for idx, msg in calls:
        if idx in used:
            with pytest.raises(OneTimeViolation):
                make_tag(HashKey(7), keys[idx], msg, 0)
        else:
            make_tag(HashKey(7), keys[idx], msg, 0)
            used.add(idx)
    assert {i for i, k in enumerate(keys) if k.consumed} == used


def test_pad_reuse_exposes_hash_difference():
    # why the one-time guard exists: a reused pad cancels out
    kh, pad = 0x1234_5678_9ABC_DEF0, 0x0F0F_0F0F_0F0F_0F0F
    m1, m2 = b"pay alice 5", b"pay mallory 500"
    t1 = make_tag(HashKey(kh), OtpKey(pad), m1, 3).value
    t2 = make_tag(HashKey(kh), OtpKey(pad), m2, 3).value
    h = lambda m: axu_hash(HashKey(kh), m + (3).to_bytes(8, "big"))
    assert t1 ^ t2 == h(m1) ^ h(m2)


def test_single_bit_flip_changes_tag_16bit():
    rng = random.Random(11)
    msg_len = 6
    t = len(message_blocks(b"\0" * msg_len + b"\0" * 8, 16))
    same = 0
    trials = 10**4
    for _ in range(trials):
        kh, ko = rng.getrandbits(16), rng.getrandbits(16)
        m = bytes(rng.getrandbits(8) for _ in range(msg_len))
        bit = rng.randrange(msg_len * 8)
        m2 = bytearray(m)
        m2[bit // 8] ^= 1 << (bit % 8)
        a = make_tag(HashKey(kh, 16), OtpKey(ko, 16), m, 1).value
        b = make_tag(HashKey(kh, 16), OtpKey(ko, 16), bytes(m2), 1).value
        same += a == b
    assert 1 - same / trials >= 1 - t / 2**16


def _pairs(n, sender, rng, bits=64):
    raw = {j: (rng.getrandbits(bits), rng.getrandbits(bits)) for j in range(n) if j != sender}
    sender_side = {j: (HashKey(a, bits), OtpKey(b, bits)) for j, (a, b) in raw.items()}
    return raw, sender_side


def test_vector_n2():
    rng = random.Random(2)
    raw, keys = _pairs(2, 0, rng)
    v = build_vector(0, 2, keys, b"m", 0)
    assert v.n == 2 and v.tags[0] == 0
    assert verify_slot(v, 1, HashKey(raw[1][0]), OtpKey(raw[1][1]), b"m", 0)
    assert v.well_formed()


def test_vector_n4_verified_by_each_peer():
    rng = random.Random(4)
    raw, keys = _pairs(4, 2, rng)
    v = build_vector(2, 4, keys, b"payload", 17)
    assert v.tags[2] == 0
    for j, (a, b) in raw.items():
        assert verify_slot(v, j, HashKey(a), OtpKey(b), b"payload", 17)
        assert not verify_slot(v, j, HashKey(a), OtpKey(b), b"payload", 18)
    assert not verify_slot(v, 2, HashKey(1), OtpKey(1), b"payload", 17)
    assert all(ko.consumed for _, ko in keys.values())


def test_vector_missing_keys():
    rng = random.Random(5)
    _, keys = _pairs(4, 0, rng)
    del keys[3]
    with pytest.raises(KeyExhausted):
        build_vector(0, 4, keys, b"m", 0)
    assert not any(ko.consumed for _, ko in keys.values())


def test_vector_serialization():
    v = AuthVector(1, (5, 0, 7), 64)
    data = v.to_bytes()
    assert data[:4] == b"\0\0\0\1"
    assert data[4:12] == (5).to_bytes(8, "big")
    assert len(data) == 4 + 3 * 8
    assert AuthVector.from_bytes(data, 3) == v
    with pytest.raises(ValueError):
        AuthVector.from_bytes(data[:-1], 3)


def test_forgery_bound_values():
    assert forgery_bound(64, 2**20) == Fraction(1, 2**44)
    assert float(forgery_bound(64, 2**20)) == pytest.approx(5.68e-14, rel=1e-3)
    assert forgery_bound(64, 1) == Fraction(1, 2**64)
    assert forgery_bound(16, 2**4) == Fraction(1, 2**12)


def test_key_range_checks():
    with pytest.raises(ValueError):
        HashKey(2**64)
    with pytest.raises(ValueError):
        OtpKey(1, bits=24)


def test_monte_carlo_forgery_small():
    for strategy in ("planted", "random"):
        r = substitution_forgery(bits=16, trials=4 * 10**5, data_blocks=4, strategy=strategy, seed=1)
        assert r.rate <= 3 * float(r.bound)


def test_exhaustive_axu_gf256_small():
    r = exhaustive_axu_gf256(samples=200, seed=2)
    assert r.violations == 0
    assert r.worst_count <= r.worst_degree


def test_framing_resistance_16bit():
    r = framing_attempts(bits=16, attempts=10**6, seed=3)
    assert r.accepted <= r.ceiling
