from __future__ import annotations

import hashlib
import json
from dataclasses import replace

import pytest

from qrchain.auth import AuthVector, build_vector
from qrchain.errors import Unauditable
from qrchain.keystore import EvidencePayload, build_network_keystores
from qrchain.ledger import (
    ZERO_HASH,
    AccountState,
    Block,
    BlockHeader,
    Chain,
    InvalidBlock,
    Payment,
    RejectReason,
    Transaction,
    apply_block,
    audit_block,
    audit_chain,
    chain_from_bytes,
    chain_to_bytes,
    chain_to_json,
    decode_evidence,
    encode_evidence,
    header_hash,
    make_block,
    read_chain,
    validate_transaction,
    validate_transactions,
)
from qrchain.tamper import build_honest_chain, mutations, tampered_fixture, write_fixtures


@pytest.fixture
def net():
    stores = build_network_keystores(4, b"ledger", seed_bits=8192)
    return stores, AccountState.genesis(4, 100)


def _tx(stores, s, r, amount, ctr, bits=64):
    pay = Payment(s, r, amount, 7)
    keys = stores[s].reserve_evidence_all(ctr)
    return Transaction(s, ctr, pay, build_vector(s, 4, keys, pay.to_bytes(), ctr, bits))


def test_zero_header_golden():
    hdr = BlockHeader(0, ZERO_HASH, ZERO_HASH, 0, 0)
    enc = bytes(8) + b"\0\0\0\x20" + bytes(32) + b"\0\0\0\x20" + bytes(32) + bytes(4) + bytes(8)
    assert hdr.to_bytes() == enc
    assert header_hash(hdr) == hashlib.sha256(b"qrchain/header" + enc).digest()
    # FIPS 180-2 style check that the digest primitive itself is SHA-256
    assert hashlib.sha256(b"abc").hexdigest().startswith("ba7816bf8f01cfea")
    assert header_hash(hdr).hex() == hashlib.sha256(b"qrchain/header" + enc).hexdigest()


def test_header_bit_flip_sweep():
    hdr = BlockHeader(5, bytes(range(32)), bytes(range(32, 64)), 3, 9)
    base = header_hash(hdr)
    for f, width in (("height", 64), ("proposer", 32), ("view", 64)):
        for b in range(width):
            assert header_hash(replace(hdr, **{f: getattr(hdr, f) ^ (1 << b)})) != base
    for f in ("prev_hash", "body_digest"):
        raw = getattr(hdr, f)
        for b in range(256):
            flipped = (int.from_bytes(raw, "big") ^ (1 << b)).to_bytes(32, "big")
            assert header_hash(replace(hdr, **{f: flipped})) != base


def test_accept_well_formed(net):
    stores, state = net
    tx = _tx(stores, 0, 1, 10, 0)
    for v in (1, 2, 3, 0):
        assert validate_transaction(state, tx, v, stores[v]).accepted


def test_reject_reasons(net):
    stores, state = net
    tx = _tx(stores, 0, 1, 500, 0)
    assert validate_transaction(state, tx, 1, stores[1]).reason is RejectReason.INSUFFICIENT_BALANCE
    ok = _tx(stores, 1, 2, 5, 0)
    after = apply_block(state, make_block(1, state.tip_hash, 0, 0, [ok], EvidencePayload(0)))
    assert validate_transaction(after, ok, 2, stores[2]).reason is RejectReason.REPLAY
    bad = replace(ok, payment=replace(ok.payment, amount=6))
    assert validate_transaction(state, bad, 2, stores[2]).reason is RejectReason.BAD_TAG
    short = replace(ok, vector=AuthVector(1, ok.vector.tags[:3]))
    assert validate_transaction(state, short, 2, stores[2]).reason is RejectReason.MISSING_TAG
    gap = _tx(stores, 2, 3, 1, 0)
    gap = replace(gap, ctr=4)
    assert validate_transaction(state, gap, 3, stores[3]).reason is RejectReason.BAD_TAG
    assert state.semantic_check(gap).reason is RejectReason.COUNTER_GAP
    far = replace(gap, ctr=10**9)
    assert validate_transaction(state, far, 3, stores[3]).reason is RejectReason.KEY_UNAVAILABLE
    selfpay = replace(ok, payment=replace(ok.payment, receiver=1))
    assert state.semantic_check(selfpay).reason is RejectReason.MALFORMED


def test_sequential_validation_spends_balance(net):
    stores, state = net
    a = _tx(stores, 0, 1, 60, 0)
    b = _tx(stores, 0, 2, 60, 1)
    verdicts = validate_transactions(state, [a, b], 3, stores[3])
    assert verdicts[0].accepted and verdicts[1].reason is RejectReason.INSUFFICIENT_BALANCE


def test_empty_block_and_conservation(net):
    stores, state = net
    empty = make_block(1, state.tip_hash, 1, 0, [], EvidencePayload(0))
    s1 = apply_block(state, empty)
    assert s1.balances == state.balances and s1.height == 1
    t1, t2 = _tx(stores, 0, 1, 30, 0), _tx(stores, 1, 2, 50, 0)
    s2 = apply_block(s1, make_block(2, s1.tip_hash, 2, 0, [t1, t2], EvidencePayload(1)))
    assert s2.total == state.total == 400
    assert s2.balances == {0: 70, 1: 80, 2: 150, 3: 100}
    with pytest.raises(InvalidBlock):
        apply_block(s2, make_block(3, s2.tip_hash, 0, 0, [t1], EvidencePayload(2)))
    with pytest.raises(InvalidBlock):
        apply_block(s2, make_block(3, ZERO_HASH, 0, 0, [], EvidencePayload(2)))


def test_block_evidence_height_invariant():
    with pytest.raises(ValueError):
        make_block(3, ZERO_HASH, 0, 0, [], EvidencePayload(1))
    with pytest.raises(ValueError):
        make_block(3, ZERO_HASH, 0, 0, [], None)


def test_replicas_reach_identical_state_digest():
    chain = build_honest_chain(n=4, blocks=5, txs_per_block=4, seed=3)
    data = chain_to_bytes(chain)
    digests = {chain_from_bytes(data).replay_state().digest() for _ in range(4)}
    assert len(digests) == 1


def test_three_block_chain_tamper_breaks_descendants():
    chain = build_honest_chain(n=4, blocks=3, txs_per_block=2, seed=1)
    assert chain.integrity_errors() == []
    tx = chain.blocks[1].transactions[0]
    forged = replace(tx, payment=replace(tx.payment, amount=tx.payment.amount + 1))
    blk = chain.blocks[1]
    txs = (forged,) + blk.transactions[1:]
    chain.blocks[1] = Block(blk.header, txs, blk.evidence_for_previous)
    assert chain.integrity_errors() == ["block 1: body digest mismatch"]
    # resealing block 1 moves the break to block 2, resealing 2 moves it to 3
    chain.blocks[1] = make_block(1, blk.header.prev_hash, blk.header.proposer, 0, txs, blk.evidence_for_previous)
    assert chain.integrity_errors() == ["block 2: prev_hash does not match block 1"]
    b2 = chain.blocks[2]
    chain.blocks[2] = Block(replace(b2.header, prev_hash=chain.blocks[1].digest), b2.transactions,
                            b2.evidence_for_previous)
    assert chain.integrity_errors() == ["block 3: prev_hash does not match block 2"]


def test_honest_audit_passes_and_needs_no_keys():
    chain = build_honest_chain(n=5, blocks=4, txs_per_block=3, seed=2)
    # a fresh decoder holds only public bytes; no keystore is involved
    rep = audit_chain(chain_from_bytes(chain_to_bytes(chain)))
    assert rep.ok and len(rep.blocks) == 4
    assert all(t.ok for t in audit_block(chain, 4).transactions)


def test_missing_payload_unauditable():
    chain = build_honest_chain(n=4, blocks=2, seed=4)
    chain.epilogue = None
    with pytest.raises(Unauditable):
        audit_block(chain, 2)
    rep = audit_chain(chain)
    assert not rep.ok and rep.unauditable == (2,)
    with pytest.raises(Unauditable):
        audit_chain(chain, strict=True)


def test_tamper_suite_always_detected():
    chain = build_honest_chain(n=3, blocks=2, txs_per_block=2, seed=5)
    count = 0
    for m in mutations(chain, bit_stride=3):
        rep = audit_chain(m.chain)
        assert not rep.ok, m.label
        count += 1
    assert count > 500


def test_tampered_fixture_locates_tx():
    chain = build_honest_chain(n=4, blocks=3, txs_per_block=3, seed=6)
    bad, h, s, c = tampered_fixture(chain)
    rep = audit_chain(bad)
    assert rep.integrity_errors == ()  # re-linked, so only the audit sees it
    assert [(hh, t.sender, t.ctr) for hh, t in rep.failed_transactions()] == [(h, s, c)]


def test_chain_file_round_trip(tmp_path):
    chain = build_honest_chain(n=4, blocks=3, seed=7)
    data = chain_to_bytes(chain)
    assert data[:4] == b"QRCH"
    back = chain_from_bytes(data)
    assert chain_to_bytes(back) == data
    assert back.digests() == chain.digests()
    paths = write_fixtures(tmp_path)
    assert audit_chain(read_chain(paths["honest"])).ok
    doc = json.loads(json.dumps(chain_to_json(chain)))
    assert doc["blocks"][1]["prev_hash"] == chain.blocks[0].digest.hex()
    with pytest.raises(ValueError):
        chain_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(ValueError):
        chain_from_bytes(data[:-3])


def test_evidence_codec():
    chain = build_honest_chain(n=4, blocks=2, seed=8)
    p = chain.epilogue
    assert decode_evidence(encode_evidence(p)) == p
    assert decode_evidence(b"") is None


def test_bundled_fixtures_match_generator(tmp_path):
    from pathlib import Path

    here = Path(__file__).parent / "fixtures"
    fresh = write_fixtures(tmp_path)
    for name, path in fresh.items():
        assert (here / path.name).read_bytes() == path.read_bytes(), name
