"""Randomized key-lifecycle traces over a full set of pool copies.

Drives reservations, aborts, disclosures, consensus use and erasure, and
scheduled replenishment in random order, checking the one-time property and
the bit ledger of every pool copy after each event.
"""
from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass, field

from ..errors import KeyErased, KeyExhausted, NonMonotonicCounter, StratificationViolation
from ..keystore import Stratum, build_network_keystores, schedule_replenishment


@dataclass
class TraceReport:
    events: int
    reservations: int = 0
    duplicates: int = 0
    conservation_failures: int = 0
    symmetry_failures: int = 0
    wall_breaches: int = 0
    guard_misses: int = 0
    exhausted: int = 0
    kinds: Counter = field(default_factory=Counter)

    @property
    def ok(self) -> bool:
        return not (self.duplicates or self.conservation_failures or self.symmetry_failures
                    or self.wall_breaches or self.guard_misses)


def run_key_trace(events: int = 10**5, n: int = 4, seed: int = 0, *, seed_bits: int = 2048,
                  tick_bits: int = 1024, bits: int = 64, count_hash_keys: bool = False) -> TraceReport:
    rng = random.Random(f"{seed}:keytrace")
    stores = build_network_keystores(n, b"trace-%d" % seed, bits=bits, seed_bits=seed_bits,
                                     count_hash_keys=count_hash_keys, low_watermark=4 * bits,
                                     postprocessing_fraction=0.01)
    report = TraceReport(events)
    seen: set[tuple[int, int, str, int]] = set()
    pending: list[tuple[int, int]] = []          # (sender, ctr) reserved, not yet final
    used_con: list[tuple[int, int, int]] = []    # (sender, receiver, index) awaiting erasure
    disclosed_vals: set[tuple[int, int]] = set()
    consensus_vals: set[tuple[int, int]] = set()
    next_ctr = [0] * n

    def note(s: int, r: int, stratum: Stratum, idx: int) -> None:
        report.reservations += 1
        key = (s, r, stratum.value, idx)
        if key in seen:
            report.duplicates += 1
        seen.add(key)

    def expect(exc: type, fn, *args) -> None:
        try:
            fn(*args)
        except exc:
            return
        report.guard_misses += 1

    for _ in range(events):
        roll = rng.random()
        s = rng.randrange(n)
        store = stores[s]
        if roll < 0.30:
            kind = "send_tx"
            try:
                pairs = store.reserve_evidence_all(next_ctr[s])
            except KeyExhausted:
                report.exhausted += 1
            else:
                for r, kp in pairs.items():
                    note(s, r, Stratum.EVIDENCE, kp.index)
                    mirror = stores[r].incoming[s].evidence_pair(kp.index)
                    if mirror.k_hash != kp.k_hash or mirror.k_otp.value != kp.k_otp.value:
                        report.symmetry_failures += 1
                pending.append((s, next_ctr[s]))
                next_ctr[s] += 1
        elif roll < 0.45 and pending:
            kind = "finalize_tx"
            snd, ctr = pending.pop(rng.randrange(len(pending)))
            for r in stores[snd].peers():
                disclosed_vals.add(stores[snd].outgoing[r].disclose(Stratum.EVIDENCE, ctr))
                stores[r].incoming[snd].mark_evidence_used(ctr)
        elif roll < 0.50 and pending:
            kind = "abort_tx"
            snd, ctr = pending.pop(rng.randrange(len(pending)))
            for r in stores[snd].peers():
                stores[snd].outgoing[r].retire_evidence(ctr)
                stores[r].incoming[snd].mark_evidence_used(ctr)
            expect(KeyErased, stores[snd].outgoing[stores[snd].peers()[0]].evidence_pair, ctr)
        elif roll < 0.70:
            kind = "send_vote"
            count = rng.randint(1, 3)
            try:
                bundle = store.reserve_consensus_all(count)
            except KeyExhausted:
                report.exhausted += 1
            else:
                for r, kps in bundle.items():
                    for kp in kps:
                        note(s, r, Stratum.CONSENSUS, kp.index)
                        consensus_vals.add((kp.k_hash.value, kp.k_otp.value))
                        used_con.append((s, r, kp.index))
        elif roll < 0.82 and used_con:
            kind = "verify_erase"
            snd, r, idx = used_con.pop(rng.randrange(len(used_con)))
            pool = stores[r].incoming[snd]
            pool.consensus_pair(idx)
            pool.erase_consensus_key(idx)
            pool.erase_consensus_key(idx)  # idempotent
            expect(KeyErased, pool.consensus_pair, idx)
        elif roll < 0.86:
            kind = "sender_erase"
            for pool in store.outgoing.values():
                if pool.consensus.head:
                    pool.erase_consensus_keys(pool.consensus.head - 1)
        elif roll < 0.96:
            kind = "replenish"
            senders = [p for st in stores for p in st.outgoing.values()]
            alloc = schedule_replenishment(senders, tick_bits)
            for (a, b), gen in alloc.items():
                stores[a].outgoing[b].replenish(gen)
                stores[b].incoming[a].replenish(gen)
        else:
            kind = "misuse"
            r = store.peers()[0]
            pool = store.outgoing[r]
            if pool.evidence.head:
                expect(NonMonotonicCounter, pool.reserve_evidence, pool.evidence.head - 1)
            expect(StratificationViolation, pool.disclose, Stratum.CONSENSUS, 0)
        report.kinds[kind] += 1
        for st in stores:
            for pool in st.pools():
                gen, acc = pool.conservation()
                if gen != acc or pool.evidence.in_pool_bits < 0 or pool.consensus.in_pool_bits < 0:
                    report.conservation_failures += 1
    report.wall_breaches = len(disclosed_vals & consensus_vals)
    return report
