"""Pairwise one-time key pools, split into an evidence stream and a consensus stream.

One ``PairwiseKeyPool`` object models one endpoint's copy of the key material
for an ordered pair (sender -> receiver).  Both endpoints build their copy from
the same ``KeySource`` and receive identical ``replenish`` calls, so the same
index yields the same (hash key, pad) on both sides.

Accounting works in bits.  A reservation costs ``S_key`` bits, or ``2*S_key``
when ``count_hash_keys`` is set.  Per copy the ledger
``generated = used_evidence + used_consensus + in_pool + bootstrap_reserve``
holds at all times, where a stream's used bits are ``head * cost``.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field as dc_field
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Iterator, Mapping

from .auth.wc import HashKey, OtpKey
from .errors import (
    DisclosureRefused,
    KeyErased,
    KeyExhausted,
    NonMonotonicCounter,
    StratificationViolation,
)

if TYPE_CHECKING:
    from .ledger import Block

DEFAULT_SEED_BITS = 10**6


def stratification_ratio(n: int, block_size: int = 2500, rounds: int = 3) -> float:
    """Evidence share of new key material when demand splits as B : P*N."""
    return block_size / (block_size + rounds * n)


# fallback split for pools built without a network size (N=20, B=2500, P=3)
DEFAULT_EVIDENCE_RATIO = stratification_ratio(20)


class Stratum(Enum):
    EVIDENCE = "evidence"
    CONSENSUS = "consensus"


_STRATUM_TAG = {Stratum.EVIDENCE: b"E", Stratum.CONSENSUS: b"C"}


class KeySource:
    """Deterministic stand-in for the QKD output of one ordered pair."""

    def __init__(self, secret: bytes, bits: int = 64) -> None:
        if not secret:
            raise ValueError("empty pair secret")
        self._secret = secret[:64]
        self.bits = bits
        self._width = bits // 8

    @classmethod
    def for_pair(cls, master: bytes, sender: int, receiver: int, bits: int = 64) -> "KeySource":
        secret = hashlib.blake2b(b"pair" + sender.to_bytes(4, "big") + receiver.to_bytes(4, "big"),
                                 key=master[:64], digest_size=32).digest()
        return cls(secret, bits)

    def material(self, stratum: Stratum, index: int) -> tuple[int, int]:
        d = hashlib.blake2b(_STRATUM_TAG[stratum] + index.to_bytes(8, "big"),
                            key=self._secret, digest_size=2 * self._width).digest()
        w = self._width
        return int.from_bytes(d[:w], "big"), int.from_bytes(d[w:], "big")


@dataclass
class KeyPair:
    """A (hash key, pad) pair handed out by a pool; unpacks as a 2-tuple."""

    k_hash: HashKey
    k_otp: OtpKey
    stratum: Stratum
    index: int

    def __iter__(self) -> Iterator:
        yield self.k_hash
        yield self.k_otp

    def __getitem__(self, i: int):
        return (self.k_hash, self.k_otp)[i]


class KeyStream:
    def __init__(self, stratum: Stratum, cost: int) -> None:
        self.stratum = stratum
        self.cost = cost
        self.allocated_bits = 0
        self.head = 0
        self.erased_below = 0
        self._erased: set[int] = set()
        self.inflight: set[int] = set()
        self.disclosed: set[int] = set()
        self.retired: set[int] = set()

    @property
    def capacity(self) -> int:
        return self.allocated_bits // self.cost

    @property
    def available_keys(self) -> int:
        return max(0, self.capacity - self.head)

    @property
    def used_bits(self) -> int:
        return self.head * self.cost

    @property
    def in_pool_bits(self) -> int:
        return self.allocated_bits - self.used_bits

    def is_erased(self, index: int) -> bool:
        return index < self.erased_below or index in self._erased

    def erase(self, index: int) -> None:
        if index < self.erased_below:
            return
        self._erased.add(index)
        while self.erased_below in self._erased:
            self._erased.discard(self.erased_below)
            self.erased_below += 1

    def erase_through(self, up_to: int) -> None:
        if up_to < self.erased_below:
            return
        self.erased_below = up_to + 1
        self._erased = {i for i in self._erased if i > up_to}
        while self.erased_below in self._erased:
            self._erased.discard(self.erased_below)
            self.erased_below += 1

    def advance_to(self, index: int) -> None:
        if index > self.head:
            self.head = index


class PairwiseKeyPool:
    def __init__(self, sender: int, receiver: int, source: KeySource, *, bits: int = 64,
                 count_hash_keys: bool = False, seed_bits: int = DEFAULT_SEED_BITS,
                 low_watermark: int = 0, bootstrap_reserve_bits: int = 0,
                 postprocessing_fraction: float = 0.0,
                 evidence_ratio: float = DEFAULT_EVIDENCE_RATIO) -> None:
        if sender == receiver:
            raise ValueError("a pool needs two distinct endpoints")
        if source.bits != bits:
            raise ValueError("key source width differs from the tag size")
        if not 0 <= postprocessing_fraction < 1:
            raise ValueError("postprocessing_fraction must lie in [0, 1)")
        self.peer_pair = (sender, receiver)
        self.bits = bits
        self.cost = 2 * bits if count_hash_keys else bits
        self._source = source
        self.low_watermark = low_watermark
        self.postprocessing_fraction = postprocessing_fraction
        self.evidence_ratio = evidence_ratio
        self.evidence = KeyStream(Stratum.EVIDENCE, self.cost)
        self.consensus = KeyStream(Stratum.CONSENSUS, self.cost)
        self.generated_bits = 0
        self.bootstrap_reserve = 0
        self.last_replenished_at = 0
        if seed_bits:
            withheld = min(seed_bits, bootstrap_reserve_bits)
            self.generated_bits += withheld
            self.bootstrap_reserve += withheld
            self._split(seed_bits - withheld)

    def __repr__(self) -> str:
        s, r = self.peer_pair
        return f"PairwiseKeyPool({s}->{r}, ev={self.evidence.available_keys}, con={self.consensus.available_keys})"

    # -- material ------------------------------------------------------------------

    def _stream(self, stratum: Stratum) -> KeyStream:
        return self.evidence if stratum is Stratum.EVIDENCE else self.consensus

    def _pair(self, stratum: Stratum, index: int) -> KeyPair:
        kh, ko = self._source.material(stratum, index)
        return KeyPair(HashKey(kh, self.bits), OtpKey(ko, self.bits), stratum, index)

    def _readable(self, stream: KeyStream, index: int) -> None:
        if index < 0 or index >= stream.capacity:
            raise KeyErased(f"{stream.stratum.value} index {index} not generated yet")
        if stream.is_erased(index) or index in stream.retired:
            raise KeyErased(f"{stream.stratum.value} index {index} is no longer available")

    # -- evidence stream -------------------------------------------------------------

    def can_reserve_evidence(self) -> bool:
        return self.evidence.available_keys >= 1

    def reserve_evidence(self, ctr: int) -> KeyPair:
        st = self.evidence
        if ctr != st.head:
            raise NonMonotonicCounter(f"counter {ctr} but evidence head is {st.head}")
        if st.available_keys < 1:
            raise KeyExhausted(f"evidence stream {self.peer_pair} is empty")
        st.head += 1
        st.inflight.add(ctr)
        return self._pair(Stratum.EVIDENCE, ctr)

    def evidence_pair(self, ctr: int) -> KeyPair:
        """Verifier-side lookup of the evidence pair at ``ctr``."""
        self._readable(self.evidence, ctr)
        return self._pair(Stratum.EVIDENCE, ctr)

    def mark_evidence_used(self, ctr: int) -> None:
        """Receiver copy: the sender's transaction at ``ctr`` is final."""
        self.evidence.advance_to(ctr + 1)

    def retire_evidence(self, ctr: int) -> None:
        st = self.evidence
        st.inflight.discard(ctr)
        if ctr < st.head:
            st.retired.add(ctr)

    def disclose(self, stratum: Stratum, index: int) -> tuple[int, int]:
        if stratum is not Stratum.EVIDENCE:
            raise StratificationViolation("consensus keys are never disclosed")
        st = self.evidence
        if index not in st.inflight:
            raise KeyErased(f"evidence index {index} is not awaiting disclosure")
        st.inflight.discard(index)
        st.disclosed.add(index)
        return self._source.material(Stratum.EVIDENCE, index)

    def disclose_evidence(self, ctr: int) -> tuple[int, int]:
        return self.disclose(Stratum.EVIDENCE, ctr)

    # -- consensus stream ------------------------------------------------------------

    def reserve_consensus(self) -> KeyPair:
        return self.reserve_consensus_block(1)[0]

    def reserve_consensus_block(self, count: int) -> list[KeyPair]:
        """Reserve ``count`` consecutive consensus pairs, all or none."""
        st = self.consensus
        if st.available_keys < count:
            raise KeyExhausted(f"consensus stream {self.peer_pair} is empty")
        base = st.head
        st.head += count
        return [self._pair(Stratum.CONSENSUS, base + i) for i in range(count)]

    def consensus_pair(self, index: int) -> KeyPair:
        self._readable(self.consensus, index)
        return self._pair(Stratum.CONSENSUS, index)

    def erase_consensus_key(self, index: int) -> None:
        st = self.consensus
        st.erase(index)
        st.advance_to(index + 1)

    def erase_consensus_keys(self, up_to_index: int) -> None:
        st = self.consensus
        st.erase_through(up_to_index)
        st.advance_to(up_to_index + 1)

    # -- replenishment ---------------------------------------------------------------

    def _split(self, bits: int) -> None:
        ev = math.floor(self.evidence_ratio * bits)
        self.evidence.allocated_bits += ev
        self.consensus.allocated_bits += bits - ev
        self.generated_bits += bits

    def replenish(self, generated_bits: int, sim_time: int = 0) -> None:
        if generated_bits < 0:
            raise ValueError("negative key generation")
        if generated_bits == 0:
            return
        withheld = math.floor(self.postprocessing_fraction * generated_bits)
        self.bootstrap_reserve += withheld
        self.generated_bits += withheld
        self._split(generated_bits - withheld)
        self.last_replenished_at = sim_time

    @property
    def level_bits(self) -> int:
        return self.evidence.in_pool_bits + self.consensus.in_pool_bits

    def below_watermark(self) -> bool:
        return self.level_bits < self.low_watermark

    def conservation(self) -> tuple[int, int]:
        """(generated, accounted); equal whenever the ledger is intact."""
        ev, con = self.evidence, self.consensus
        accounted = ev.used_bits + con.used_bits + ev.in_pool_bits + con.in_pool_bits + self.bootstrap_reserve
        return self.generated_bits, accounted

    def check_conservation(self) -> None:
        gen, acc = self.conservation()
        ev, con = self.evidence, self.consensus
        if gen != acc or ev.in_pool_bits < 0 or con.in_pool_bits < 0:
            raise AssertionError(f"key ledger broken for {self.peer_pair}: {gen} != {acc}")

    def snapshot(self) -> dict:
        ev, con = self.evidence, self.consensus
        return {
            "pair": list(self.peer_pair),
            "evidence_head": ev.head,
            "consensus_head": con.head,
            "evidence_bits": ev.in_pool_bits,
            "consensus_bits": con.in_pool_bits,
            "generated_bits": self.generated_bits,
            "bootstrap_reserve_bits": self.bootstrap_reserve,
            "disclosed_ranges": index_ranges(ev.disclosed),
        }


def index_ranges(indices: Iterable[int]) -> list[list[int]]:
    """Compress a set of integers into inclusive [start, end] runs."""
    out: list[list[int]] = []
    for i in sorted(indices):
        if out and i == out[-1][1] + 1:
            out[-1][1] = i
        else:
            out.append([i, i])
    return out


# -- scheduling ----------------------------------------------------------------------


def replenishment_order(pools: Iterable[PairwiseKeyPool]) -> list[PairwiseKeyPool]:
    """Pools under their watermark first, then by fill level, ties by pair id."""
    return sorted(pools, key=lambda p: (not p.below_watermark(), p.level_bits, p.peer_pair))


def _water_fill(levels: list[tuple[int, tuple[int, int]]], budget: int,
                cap: Mapping[tuple[int, int], int] | None = None) -> dict[tuple[int, int], int]:
    # levels: (level, pair) sorted ascending; raise the lowest ones to a common level
    alloc: dict[tuple[int, int], int] = {}
    if budget <= 0 or not levels:
        return alloc
    total, k = 0, 0
    water = 0.0
    for k in range(1, len(levels) + 1):
        total += levels[k - 1][0]
        water = (budget + total) / k
        if k == len(levels) or water <= levels[k][0]:
            break
    spent = 0
    for lvl, pair in levels[:k]:
        target = math.floor(water)
        if cap is not None:
            target = min(target, cap[pair])
        give = max(0, target - lvl)
        alloc[pair] = give
        spent += give
    left = budget - spent
    if cap is None:
        for lvl, pair in levels[:k]:
            if left <= 0:
                break
            alloc[pair] += 1
            left -= 1
    return alloc


def schedule_replenishment(pools: Iterable[PairwiseKeyPool], budget_bits: int) -> dict[tuple[int, int], int]:
    """Split one tick of generated bits across pools.

    Pools below their low watermark are topped up towards it first; what is
    left is water-filled over all pools so the emptiest pools gain the most.
    """
    pools = replenishment_order(pools)
    alloc = {p.peer_pair: 0 for p in pools}
    low = [p for p in pools if p.below_watermark()]
    if low:
        caps = {p.peer_pair: p.low_watermark for p in low}
        first = _water_fill(sorted((p.level_bits, p.peer_pair) for p in low), budget_bits, caps)
        for pair, b in first.items():
            alloc[pair] += b
        budget_bits -= sum(first.values())
    levels = sorted((p.level_bits + alloc[p.peer_pair], p.peer_pair) for p in pools)
    for pair, b in _water_fill(levels, budget_bits).items():
        alloc[pair] += b
    return alloc


# -- per-node view and evidence payloads -------------------------------------------------


@dataclass(frozen=True)
class EvidenceEntry:
    sender: int
    ctr: int
    keys: tuple[tuple[int, int, int], ...]  # (peer, k_hash, k_otp), ascending peer

    def key_for(self, peer: int) -> tuple[int, int] | None:
        for p, kh, ko in self.keys:
            if p == peer:
                return kh, ko
        return None


@dataclass(frozen=True)
class EvidencePayload:
    block_height: int
    entries: tuple[EvidenceEntry, ...] = ()
    bits: int = 64

    def __post_init__(self) -> None:
        seen = set()
        for e in self.entries:
            if (e.sender, e.ctr) in seen:
                raise ValueError("duplicate evidence entry")
            seen.add((e.sender, e.ctr))

    def lookup(self) -> dict[tuple[int, int], EvidenceEntry]:
        return {(e.sender, e.ctr): e for e in self.entries}

    def merged(self, other: "EvidencePayload") -> "EvidencePayload":
        if other.block_height != self.block_height or other.bits != self.bits:
            raise ValueError("cannot merge payloads for different blocks")
        have = self.lookup()
        extra = [e for e in other.entries if (e.sender, e.ctr) not in have]
        entries = sorted(self.entries + tuple(extra), key=lambda e: (e.sender, e.ctr))
        return EvidencePayload(self.block_height, tuple(entries), self.bits)


@dataclass
class NodeKeyStore:
    """All pool copies held by one node: outgoing (node -> peer) and incoming."""

    node_id: int
    n: int
    bits: int = 64
    outgoing: dict[int, PairwiseKeyPool] = dc_field(default_factory=dict)
    incoming: dict[int, PairwiseKeyPool] = dc_field(default_factory=dict)

    def peers(self) -> list[int]:
        return [j for j in range(self.n) if j != self.node_id]

    def pools(self) -> list[PairwiseKeyPool]:
        return [self.outgoing[j] for j in sorted(self.outgoing)] + \
               [self.incoming[j] for j in sorted(self.incoming)]

    def can_send_evidence(self) -> bool:
        return all(self.outgoing[j].can_reserve_evidence() for j in self.peers())

    def reserve_evidence_all(self, ctr: int) -> dict[int, KeyPair]:
        """Reserve index ``ctr`` towards every peer, or nothing at all."""
        peers = self.peers()
        for j in peers:
            pool = self.outgoing[j]
            if pool.evidence.head != ctr:
                raise NonMonotonicCounter(f"counter {ctr} but head towards {j} is {pool.evidence.head}")
            if not pool.can_reserve_evidence():
                raise KeyExhausted(f"evidence stream {self.node_id}->{j} is empty")
        return {j: self.outgoing[j].reserve_evidence(ctr) for j in peers}

    def can_reserve_consensus(self, count: int) -> bool:
        return all(self.outgoing[j].consensus.available_keys >= count for j in self.peers())

    def reserve_consensus_all(self, count: int) -> dict[int, list[KeyPair]]:
        if not self.can_reserve_consensus(count):
            raise KeyExhausted(f"consensus streams of node {self.node_id} cannot supply {count} keys")
        return {j: self.outgoing[j].reserve_consensus_block(count) for j in self.peers()}


def extract_evidence_payload(store: NodeKeyStore, block: "Block", *, finalized: bool) -> EvidencePayload:
    """Disclose the evidence pairs behind this node's own transactions in ``block``."""
    if not finalized:
        raise DisclosureRefused("evidence keys are revealed only after the block is final")
    entries = []
    for tx in block.transactions:
        if tx.sender != store.node_id:
            continue
        keys = []
        for j in store.peers():
            kh, ko = store.outgoing[j].disclose(Stratum.EVIDENCE, tx.ctr)
            keys.append((j, kh, ko))
        entries.append(EvidenceEntry(tx.sender, tx.ctr, tuple(keys)))
    entries.sort(key=lambda e: e.ctr)
    return EvidencePayload(block.header.height, tuple(entries), store.bits)


def build_network_keystores(n: int, master: bytes, *, bits: int = 64, **pool_kwargs) -> list[NodeKeyStore]:
    """Both copies of every ordered pool for an ``n``-node network."""
    pool_kwargs.setdefault("evidence_ratio", stratification_ratio(n))
    stores = [NodeKeyStore(i, n, bits) for i in range(n)]
    for s in range(n):
        for r in range(n):
            if s == r:
                continue
            source = KeySource.for_pair(master, s, r, bits)
            stores[s].outgoing[r] = PairwiseKeyPool(s, r, source, bits=bits, **pool_kwargs)
            stores[r].incoming[s] = PairwiseKeyPool(s, r, source, bits=bits, **pool_kwargs)
    return stores
