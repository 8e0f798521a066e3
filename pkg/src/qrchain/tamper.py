"""Honest chain construction without consensus, and single-bit tamper mutations.

``build_honest_chain`` plays every node's key handling directly: senders tag
with their evidence keys, each block's keys are disclosed once it is appended,
and the payload rides in the next block (the tip's goes to the epilogue).
"""
from __future__ import annotations

import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterator

from .auth.wc import AuthVector, build_vector
from .keystore import EvidenceEntry, EvidencePayload, build_network_keystores, extract_evidence_payload
from .ledger import (
    Block,
    Chain,
    Payment,
    Transaction,
    apply_block,
    make_block,
    rebuild_from,
    write_chain,
    AccountState,
)


def merge_payloads(height: int, payloads, bits: int) -> EvidencePayload:
    out = EvidencePayload(height, (), bits)
    for p in payloads:
        out = out.merged(p)
    return out


def build_honest_chain(n: int = 4, blocks: int = 3, txs_per_block: int = 3, seed: int = 0,
                       bits: int = 64, balance: int = 1000) -> Chain:
    rng = random.Random(f"{seed}:honest-chain")
    stores = build_network_keystores(n, b"honest-%d" % seed, bits=bits, seed_bits=64 * bits * (blocks * txs_per_block + 4))
    chain = Chain.new(n, balance, bits)
    state = AccountState.genesis(n, balance)
    next_ctr = [0] * n
    evidence = EvidencePayload(0, (), bits)
    for h in range(1, blocks + 1):
        txs = []
        for _ in range(txs_per_block):
            s = rng.randrange(n)
            r = rng.choice([j for j in range(n) if j != s])
            pay = Payment(s, r, rng.randint(1, 10), h * 1000 + len(txs))
            keys = stores[s].reserve_evidence_all(next_ctr[s])
            txs.append(Transaction(s, next_ctr[s], pay, build_vector(s, n, keys, pay.to_bytes(), next_ctr[s], bits)))
            next_ctr[s] += 1
        block = make_block(h, chain.tip.digest, h % n, 0, txs, evidence)
        state = apply_block(state, block)
        chain.append(block)
        evidence = merge_payloads(h, (extract_evidence_payload(st, block, finalized=True) for st in stores), bits)
    chain.epilogue = evidence
    return chain


@dataclass(frozen=True)
class Mutation:
    label: str
    height: int
    chain: Chain


def _flip(value: int, bit: int) -> int:
    return value ^ (1 << bit)


def _with_tx(chain: Chain, height: int, idx: int, tx: Transaction) -> Chain:
    old = chain.blocks[height]
    txs = list(old.transactions)
    txs[idx] = tx
    return rebuild_from(chain, height, Block(old.header, tuple(txs), old.evidence_for_previous))


def _with_payload(chain: Chain, height: int, payload: EvidencePayload) -> Chain:
    # the disclosed keys for block h live in block h+1, or in the epilogue at the tip
    if height == chain.height:
        return Chain(chain.n, chain.bits, dict(chain.initial_balances), list(chain.blocks), payload,
                     dict(chain.certificates))
    old = chain.blocks[height + 1]
    return rebuild_from(chain, height + 1, Block(old.header, old.transactions, payload))


def mutations(chain: Chain, *, bit_stride: int = 1) -> Iterator[Mutation]:
    """Every single-bit flip of payment fields, counters, tags and disclosed keys.

    ``bit_stride`` > 1 samples every k-th bit position to keep large suites fast.
    """
    bits = chain.bits
    for h in range(1, chain.height + 1):
        block = chain.blocks[h]
        for i, tx in enumerate(block.transactions):
            p = tx.payment
            for name, width in (("receiver", 32), ("amount", 64), ("timestamp", 64)):
                for b in range(0, width, bit_stride):
                    new_pay = replace(p, **{name: _flip(getattr(p, name), b)})
                    yield Mutation(f"h{h} tx{i} payment.{name} bit {b}", h,
                                   _with_tx(chain, h, i, replace(tx, payment=new_pay)))
            for b in range(0, 64, bit_stride):
                yield Mutation(f"h{h} tx{i} ctr bit {b}", h, _with_tx(chain, h, i, replace(tx, ctr=_flip(tx.ctr, b))))
            for j in range(chain.n):
                if j == tx.sender:
                    continue
                for b in range(0, bits, bit_stride):
                    tags = list(tx.vector.tags)
                    tags[j] = _flip(tags[j], b)
                    vec = AuthVector(tx.vector.sender, tuple(tags), tx.vector.bits)
                    yield Mutation(f"h{h} tx{i} tag[{j}] bit {b}", h, _with_tx(chain, h, i, replace(tx, vector=vec)))
        payload = chain.evidence_for(h)
        for ei, entry in enumerate(payload.entries):
            for ki, (peer, kh, ko) in enumerate(entry.keys):
                for which in ("k_hash", "k_otp"):
                    for b in range(0, bits, bit_stride):
                        keys = list(entry.keys)
                        keys[ki] = (peer, _flip(kh, b), ko) if which == "k_hash" else (peer, kh, _flip(ko, b))
                        entries = list(payload.entries)
                        entries[ei] = EvidenceEntry(entry.sender, entry.ctr, tuple(keys))
                        new = EvidencePayload(payload.block_height, tuple(entries), payload.bits)
                        yield Mutation(f"h{h} evidence s{entry.sender} c{entry.ctr} {which}[{peer}] bit {b}", h,
                                       _with_payload(chain, h, new))


def tampered_fixture(chain: Chain) -> tuple[Chain, int, int, int]:
    """Flip one amount bit of the middle transaction of block 1 *and* re-link the chain.

    Returns (chain, height, sender, ctr) of the altered transaction.  Only the
    audit locates it: the headers are all recomputed, so the chain links, but
    the tags no longer match the disclosed keys.
    """
    h = 1
    block = chain.blocks[h]
    i = len(block.transactions) // 2
    tx = block.transactions[i]
    forged = replace(tx, payment=replace(tx.payment, amount=_flip(tx.payment.amount, 0)))
    old = chain.blocks[h]
    txs = list(old.transactions)
    txs[i] = forged
    new_block = make_block(h, old.header.prev_hash, old.header.proposer, old.header.view, txs,
                           old.evidence_for_previous)
    return rebuild_from(chain, h, new_block), h, tx.sender, tx.ctr


def write_fixtures(directory: Path | str, seed: int = 0) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    honest = build_honest_chain(n=4, blocks=4, txs_per_block=3, seed=seed)
    tampered, *_ = tampered_fixture(honest)
    no_tip = Chain(honest.n, honest.bits, dict(honest.initial_balances), list(honest.blocks), None)
    paths = {"honest": d / "honest_chain.qrch", "tampered": d / "tampered_chain.qrch",
             "missing_evidence": d / "missing_evidence_chain.qrch"}
    write_chain(honest, paths["honest"])
    write_chain(tampered, paths["tampered"])
    write_chain(no_tip, paths["missing_evidence"])
    return paths


ChainFactory = Callable[[], Chain]
