"""Discrete-event run of a whole consortium: relay key supply, clients, network, replicas.

All randomness comes from named ``random.Random`` streams derived from the
scenario seed, and all ordering from a (time, sequence) heap, so a config plus
its seed fixes every byte of the outputs.
"""
from __future__ import annotations

import csv
import heapq
import io
import json
import random
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

from ..consensus import ConsensusConfig, ConsensusMessage, Replica, finality_check
from ..errors import KeyExhausted, Unauditable
from ..keyrate import ChannelParams, rate_bps
from ..keystore import build_network_keystores, schedule_replenishment
from ..ledger import NO_KEYS, Chain, audit_block
from ..planner import link_count
from ..tamper import merge_payloads
from .adversary import (
    CensoringLeader,
    EquivocatingLeader,
    FramingReceiver,
    LongRangeForger,
    SilentReplica,
)
from .config import ScenarioConfig

US = 1_000_000

DELIVER, TIMER, TICK, CLIENT, SAMPLE, ATTACK = range(6)


def ms(x: float) -> int:
    return int(round(x * 1000))


@lru_cache(maxsize=256)
def _link_rate(channel_json: str, distance_km: float) -> float:
    return rate_bps(ChannelParams.from_dict(json.loads(channel_json)), distance_km)


def link_supply_bps(cfg: ScenarioConfig) -> float:
    """Network-wide key bits per second handed to the pools (one link's rate, or a TDM share)."""
    if cfg.supply_bps is not None:
        rate = cfg.supply_bps
    else:
        rate = _link_rate(json.dumps(cfg.channel, sort_keys=True), 2.0 * cfg.radius_km)
    if cfg.keys.tdm:
        rate /= link_count(cfg.n, "mesh")
    return rate


@dataclass
class RunMetrics:
    name: str
    seed: int
    config_digest: str
    n: int
    f: int
    quorum: int
    duration_s: float
    offered_txs: int = 0
    offered_tps: float = 0.0
    finalized_txs: int = 0
    finalized_blocks: int = 0
    achieved_tps: float = 0.0
    view_changes: int = 0
    max_view: int = 0
    safety: dict = field(default_factory=dict)
    liveness: dict = field(default_factory=dict)
    messages: dict = field(default_factory=dict)
    keys: dict = field(default_factory=dict)
    audit: dict = field(default_factory=dict)
    adversaries: dict = field(default_factory=dict)
    equivocations: int = 0
    events: int = 0
    end_time_us: int = 0
    stopped_early: bool = False

    @property
    def safe(self) -> bool:
        return bool(self.safety.get("ok"))

    @property
    def key_exhausted(self) -> int:
        return int(self.keys.get("exhausted_events", 0))

    @property
    def sustainable(self) -> bool:
        return self.key_exhausted == 0 and self.finalized_txs == self.offered_txs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sustainable"] = self.sustainable
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


class Simulation:
    def __init__(self, cfg: ScenarioConfig) -> None:
        self.cfg = cfg
        n = cfg.n
        tm = cfg.consensus
        self.ccfg = ConsensusConfig(
            n, cfg.f, base_timeout=ms(tm.base_timeout_ms), timeout_backoff=tm.timeout_backoff,
            block_size=cfg.block_size, rounds=cfg.rounds, batch_wait=ms(tm.batch_wait_ms),
            evidence_wait=ms(tm.evidence_wait_ms), tx_timeout=ms(tm.tx_timeout_ms), unsafe=cfg.unsafe_quorum)
        self.horizon = int(cfg.duration_s * US)
        self.end = self.horizon + int(cfg.drain_s * US)
        self.tick = ms(cfg.tick_ms)
        # evidence/consensus split of fresh bits, seeded by the expected block fill
        expect = max(1.0, min(cfg.block_size, cfg.offered_tps * tm.batch_wait_ms / 1000.0))
        self.rho0 = expect / (expect + cfg.rounds * n)
        k = cfg.keys
        # the seed material always holds a few consensus bundles, however small blocks make that stratum
        cost = cfg.key_bits * (2 if k.count_hash_keys else 1)
        seed = max(0, k.seed_bits - k.bootstrap_reserve_bits)
        reserve = min(seed // 2, k.consensus_reserve_bundles * cfg.rounds * cost)
        rho_seed = min(self.rho0, 1 - reserve / seed) if seed else self.rho0
        self.stores = build_network_keystores(
            n, f"sim:{cfg.seed}".encode(), bits=cfg.key_bits, seed_bits=k.seed_bits,
            count_hash_keys=k.count_hash_keys, low_watermark=k.low_watermark_bits,
            bootstrap_reserve_bits=k.bootstrap_reserve_bits, postprocessing_fraction=k.postprocessing_fraction,
            evidence_ratio=rho_seed)
        for st in self.stores:
            for pool in (*st.outgoing.values(), *st.incoming.values()):
                pool.evidence_ratio = self.rho0
        self.pairs = [(s, r) for s in range(n) for r in range(n) if s != r]
        self.supply_bps = link_supply_bps(cfg)
        self.carry = 0.0
        self.dos_at: int | None = None
        self.forger: LongRangeForger | None = None
        self.attack_at = self.horizon
        self.trace_records: list[dict] = []
        self.pool_rows: list[tuple] = []
        self.queue: list = []
        self.seq = 0
        self.now = 0
        self.events = 0
        self.stopped = False
        self.exhaustions: list[tuple[int, str, int]] = []
        self.backlog: dict[int, list[tuple[int, int, int]]] = defaultdict(list)
        self.offered = 0
        self.submitted: dict[tuple[int, int], dict] = {}
        self.genuine: dict[tuple[int, int], object] = {}
        self.forged_checks = 0
        self.forged_accepted = 0
        self.audits: list[tuple[int, bool]] = []
        self.unauditable: list[int] = []
        self.missing_evidence: list[int] = []
        self.timer_at: dict[int, int | None] = {}
        self.timer_ver: dict[int, int] = defaultdict(int)
        self.replicas = self._build_replicas()
        honest = [r for r in self.replicas if r.honest]
        if not honest:
            raise ValueError("scenario has no honest replica to observe")
        self.observer = next(r for r in honest if type(r) is Replica) if any(
            type(r) is Replica for r in honest) else honest[0]
        self.seen_height = 0
        self.issuers = [r.rid for r in self.replicas if r.issues_transactions]
        self.every_event = cfg.conservation_every_event if cfg.conservation_every_event is not None else n <= 7
        self.conservation_failures = 0

    def rng(self, name: str) -> random.Random:
        return random.Random(f"{self.cfg.seed}:{name}")

    def _trace(self, rec: dict) -> None:
        if self.cfg.trace:
            self.trace_records.append(rec)

    def _build_replicas(self) -> list[Replica]:
        cfg = self.cfg
        roles = {a.replica: a for a in cfg.adversaries if a.replica is not None}
        out = []
        for rid in range(cfg.n):
            args = (rid, self.ccfg, self.stores[rid], cfg.balance)
            kw = {"trace": self._trace}
            a = roles.get(rid)
            if a is None:
                rep = Replica(*args, **kw)
            elif a.kind == "silent_replica":
                rep = SilentReplica(*args, **kw)
            elif a.kind == "censoring_leader":
                rep = CensoringLeader(*args, targets=a.params.get("targets", [(rid + 1) % cfg.n]), **kw)
            elif a.kind == "equivocating_leader":
                rep = EquivocatingLeader(*args, rng=self.rng(f"adversary:{rid}"), **kw)
            elif a.kind == "framing_receiver":
                rep = FramingReceiver(*args, rng=self.rng(f"adversary:{rid}"), budget=a.params.get("budget", 100),
                                      victims=a.params.get("victims"), **kw)
            else:  # pragma: no cover - guarded by config validation
                raise ValueError(a.kind)
            if rep.honest and not isinstance(rep, FramingReceiver):
                rep.on_tx_checked = self._tx_checked
            out.append(rep)
        for a in cfg.adversaries:
            if a.kind == "relay_dos":
                self.dos_at = int(a.params.get("at_s", 0.0) * US)
            elif a.kind == "long_range_forger":
                self.forger = LongRangeForger(self.rng("adversary:forger"), a.params.get("attempts", 1000),
                                              a.params.get("segment", 2))
                self.attack_at = int(a.params.get("at_s", cfg.duration_s) * US)
        return out

    # -- scheduling ------------------------------------------------------------------------------

    def push(self, t: int, kind: int, data) -> None:
        self.seq += 1
        heapq.heappush(self.queue, (t, self.seq, kind, data))

    def _delay(self, rng: random.Random) -> int:
        d = self.cfg.delay
        if d.kind == "fixed":
            return ms(d.ms)
        return ms(rng.uniform(d.min_ms, d.max_ms))

    def emit(self, src: int, outs) -> None:
        if not outs:
            return
        drng = self._drng
        for dst, msg in outs:
            self.push(self.now + self._delay(drng), DELIVER, (src, dst, msg))
            if self.cfg.replay_prob and isinstance(msg, ConsensusMessage) and self._rrng.random() < self.cfg.replay_prob:
                # the classical channel is not trusted: deliver a stale copy later
                self.push(self.now + self._delay(drng) + ms(self._rrng.uniform(1, 50)), DELIVER, (src, dst, msg))
                self.replays_injected += 1

    def reschedule(self, rid: int) -> None:
        d = self.replicas[rid].next_deadline()
        if d is None:
            self.timer_at[rid] = None
            return
        d = max(d, self.now + 1)
        if self.timer_at.get(rid) == d:
            return
        self.timer_at[rid] = d
        self.timer_ver[rid] += 1
        self.push(d, TIMER, (rid, self.timer_ver[rid]))

    # -- event handlers ----------------------------------------------------------------------------

    def _tx_checked(self, replica: Replica, tx, accepted: bool) -> None:
        real = self.genuine.get(tx.tx_id)
        if real is not None and real != tx:
            self.forged_checks += 1
            if accepted:
                self.forged_accepted += 1

    def _submit(self, sender: int, receiver: int, amount: int, arrived: int) -> bool:
        rep = self.replicas[sender]
        try:
            tx, outs = rep.create_transaction(receiver, amount, self.now)
        except KeyExhausted:
            self.exhaustions.append((self.now, "evidence", sender))
            if self.cfg.stop_on_exhaustion:
                self.stopped = True
            return False
        self.genuine[tx.tx_id] = tx
        self.submitted[tx.tx_id] = {"arrived": arrived, "created": self.now, "view": self.observer.view,
                                    "final": None, "final_view": None}
        self.emit(sender, outs)
        self.reschedule(sender)
        return True

    def on_client(self) -> None:
        rng = self._crng
        if self.issuers:
            s = self.issuers[rng.randrange(len(self.issuers))]
            r = rng.randrange(self.cfg.n - 1)
            r = r + 1 if r >= s else r
            self.offered += 1
            if self.backlog[s] or not self._submit(s, r, 1, self.now):
                self.backlog[s].append((r, 1, self.now))
        nxt = self.now + max(1, int(rng.expovariate(self.cfg.offered_tps) * US))
        if nxt < self.horizon:
            self.push(nxt, CLIENT, None)

    def on_tick(self) -> None:
        cfg = self.cfg
        if self.dos_at is None or self.now < self.dos_at:
            self.carry += self.supply_bps * self.tick / US
        budget = int(self.carry)
        self.carry -= budget
        senders = [self.stores[s].outgoing[r] for s, r in self.pairs]
        if cfg.keys.adaptive_ratio:
            prior = max(1, cfg.keys.seed_bits)
            for s, r in self.pairs:
                p = self.stores[s].outgoing[r]
                ev, con = p.evidence.used_bits, p.consensus.used_bits
                rho = (ev + self.rho0 * prior) / (ev + con + prior)
                p.evidence_ratio = rho
                self.stores[r].incoming[s].evidence_ratio = rho
        if budget:
            alloc = schedule_replenishment(senders, budget)
            for (s, r), bits in sorted(alloc.items()):
                if bits:
                    self.stores[s].outgoing[r].replenish(bits, self.now)
                    self.stores[r].incoming[s].replenish(bits, self.now)
        self.total_supplied += budget
        for rep in self.replicas:
            self.emit(rep.rid, rep.poke(self.now))
        for s in sorted(self.backlog):
            q = self.backlog[s]
            while q and self._submit(s, q[0][0], q[0][1], q[0][2]):
                q.pop(0)
        for rep in self.replicas:
            self.reschedule(rep.rid)
        if not self.every_event:
            self._check_conservation()
        if self.now + self.tick <= self.end:
            self.push(self.now + self.tick, TICK, None)

    def on_sample(self) -> None:
        for s, r in self.pairs:
            p = self.stores[s].outgoing[r]
            self.pool_rows.append((self.now, s, r, p.evidence.available_keys * p.evidence.cost,
                                   p.consensus.available_keys * p.consensus.cost, p.generated_bits))
        step = ms(self.cfg.pool_sample_ms)
        if step > 0 and self.now + step <= self.end:
            self.push(self.now + step, SAMPLE, None)

    def on_attack(self) -> None:
        chain = self._public_chain()
        targets = [r for r in self.replicas if r.honest]
        self.forger.attack(chain, targets, self.ccfg.quorum, self.now)
        for r in targets:
            self.emit(r.rid, [])

    def _check_conservation(self, rid: int | None = None) -> None:
        # an event only touches the pools of the replica that handled it; ticks touch all
        stores = self.stores if rid is None else (self.stores[rid],)
        for st in stores:
            for p in st.pools():
                if not p.conservation():
                    self.conservation_failures += 1

    def _public_chain(self) -> Chain:
        obs = self.observer
        chain = Chain(obs.chain.n, obs.chain.bits, dict(obs.chain.initial_balances), list(obs.chain.blocks), None,
                      dict(obs.chain.certificates))
        tip = chain.height
        if tip:
            chain.epilogue = merge_payloads(tip, (obs.evidence.get(tip, {})[s] for s in sorted(obs.evidence.get(tip, {}))),
                                            chain.bits)
        return chain

    def _observe(self) -> None:
        obs = self.observer
        while self.seen_height < obs.chain.height:
            self.seen_height += 1
            h = self.seen_height
            block = obs.chain.blocks[h]
            for tx in block.transactions:
                rec = self.submitted.get(tx.tx_id)
                if rec is not None and rec["final"] is None:
                    rec["final"] = obs.finalized_at[h]
                    rec["final_view"] = obs.view
            if self.cfg.online_audit and h >= 2:
                self._audit(obs.chain, h - 1)

    def _audit(self, chain: Chain, h: int) -> None:
        try:
            rep = audit_block(chain, h)
        except Unauditable:
            self.unauditable.append(h)
            return
        bad = [t for t in rep.transactions if not t.ok]
        # a sender whose keys never reached the next proposer leaves its txs unverifiable, not forged
        if bad and all(t.note == NO_KEYS for t in bad):
            self.missing_evidence.append(h)
            self.audits.append((h, True))
        else:
            self.audits.append((h, rep.ok))

    # -- main loop -----------------------------------------------------------------------------------

    def run(self) -> RunMetrics:
        self._drng = self.rng("delay")
        self._rrng = self.rng("replay")
        self._crng = self.rng("clients")
        self.replays_injected = 0
        self.total_supplied = 0
        self.push(0, TICK, None)
        if self.cfg.pool_sample_ms > 0:
            self.push(0, SAMPLE, None)
        if self.cfg.offered_tps > 0:
            self.push(max(1, int(self._crng.expovariate(self.cfg.offered_tps) * US)), CLIENT, None)
        if self.forger is not None:
            self.push(self.attack_at, ATTACK, None)
        obs = self.observer.rid
        stop = self.cfg.stop_on_exhaustion
        while self.queue and not self.stopped:
            t, _, kind, data = heapq.heappop(self.queue)
            if t > self.end:
                break
            self.now = t
            self.events += 1
            touched = None
            if kind == DELIVER:
                src, dst, msg = data
                touched = dst
                rep = self.replicas[dst]
                self.emit(dst, rep.on_message(msg, src, t))
                self.reschedule(dst)
                if dst == obs:
                    self._observe()
            elif kind == TIMER:
                rid, ver = data
                if ver != self.timer_ver[rid]:
                    continue
                touched = rid
                self.timer_at[rid] = None
                self.emit(rid, self.replicas[rid].on_timer(t))
                self.reschedule(rid)
                if rid == obs:
                    self._observe()
            elif kind == TICK:
                self.on_tick()
                self._observe()
            elif kind == CLIENT:
                self.on_client()
            elif kind == SAMPLE:
                self.on_sample()
            elif kind == ATTACK:
                self.on_attack()
            if self.every_event and kind != SAMPLE:
                self._check_conservation(touched)
            if stop and (kind == TICK or touched is not None and self.replicas[touched].stats["key_exhausted"]):
                if any(r.stats["key_exhausted"] for r in self.replicas):
                    self.stopped = True
        return self._metrics()

    # -- metrics -----------------------------------------------------------------------------------

    def _metrics(self) -> RunMetrics:
        cfg, obs = self.cfg, self.observer
        m = RunMetrics(cfg.name, cfg.seed, cfg.digest(), cfg.n, cfg.f, self.ccfg.quorum, cfg.duration_s)
        m.offered_txs = self.offered
        m.offered_tps = self.offered / cfg.duration_s
        m.finalized_blocks = obs.chain.height
        m.finalized_txs = sum(len(b.transactions) for b in obs.chain.blocks)
        m.achieved_tps = m.finalized_txs / cfg.duration_s
        honest = [r for r in self.replicas if r.honest]
        m.view_changes = obs.stats.get("views_entered", 0)
        m.max_view = max(r.view for r in honest)
        m.safety = finality_check(self.replicas).to_dict()
        m.equivocations = sum(r.stats.get("equivocations", 0) for r in honest)
        honest_ids = {r.rid for r in honest if r.issues_transactions}
        vcs = [rec["final_view"] - rec["view"] for key, rec in self.submitted.items()
               if key[0] in honest_ids and rec["final"] is not None]
        lat = [rec["final"] - rec["arrived"] for rec in self.submitted.values() if rec["final"] is not None]
        unfinal = sum(1 for key, rec in self.submitted.items() if key[0] in honest_ids and rec["final"] is None)
        backlog = sum(len(q) for s, q in self.backlog.items() if s in honest_ids)
        m.liveness = {
            "max_view_changes_per_tx": max(vcs, default=0),
            "honest_unfinalized": unfinal + backlog,
            "bound": cfg.f + 1,
            "ok": unfinal + backlog == 0 and max(vcs, default=0) <= cfg.f + 1,
            "mean_latency_ms": round(sum(lat) / len(lat) / 1000, 3) if lat else None,
            "max_latency_ms": round(max(lat) / 1000, 3) if lat else None,
        }
        agg = defaultdict(int)
        for r in honest:
            for k, v in r.stats.items():
                agg[k] += v
        m.messages = {
            "received": agg["received"], "verified": agg["verified"], "acted": agg["acted"],
            "acted_unverified": agg["acted_unverified"], "dropped_unverified": agg["dropped_unverified"],
            "dropped_bad_tag": agg["dropped_bad_tag"], "dropped_erased_key": agg["dropped_erased_key"],
            "replays_injected": self.replays_injected, "decided_replies": agg["decided_replies"],
            "proposals_deferred": agg["proposals_deferred"], "deferred_sends": agg["deferred_sends"],
        }
        exhausted = len(self.exhaustions) + sum(r.stats.get("key_exhausted", 0) for r in self.replicas if r.honest)
        S, N, P = cfg.key_bits, cfg.n, cfg.rounds
        measured = sum(self.stores[s].outgoing[r].evidence.used_bits + self.stores[s].outgoing[r].consensus.used_bits
                       for s, r in self.pairs)
        model = sum((N - 1) * S * (len(b.transactions) + P * N) for b in obs.chain.blocks[1:])
        if cfg.keys.count_hash_keys:
            model *= 2
        levels = [(self.stores[s].outgoing[r].evidence.available_keys,
                   self.stores[s].outgoing[r].consensus.available_keys) for s, r in self.pairs]
        m.keys = {
            "supply_bps": self.supply_bps,
            "supplied_bits": self.total_supplied,
            "consumed_bits": measured,
            "model_bits": model,
            "consumption_exact": measured == model,
            "exhausted_events": exhausted,
            "first_exhaustion_us": self.exhaustions[0][0] if self.exhaustions else None,
            "conservation_failures": self.conservation_failures,
            "min_evidence_keys": min(e for e, _ in levels),
            "min_consensus_keys": min(c for _, c in levels),
            "evidence_consumed_bits": sum(self.stores[s].outgoing[r].evidence.used_bits for s, r in self.pairs),
        }
        if cfg.online_audit and obs.chain.height:
            chain = self._public_chain()
            self._audit(chain, chain.height)
        m.audit = {
            "enabled": cfg.online_audit,
            "blocks_audited": len(self.audits),
            "failures": sorted(h for h, ok in self.audits if not ok),
            "missing_evidence": sorted(self.missing_evidence),
            "unauditable": sorted(self.unauditable),
            "ok": all(ok for _, ok in self.audits) and not self.unauditable and not self.missing_evidence,
        }
        adv = {}
        if any(isinstance(r, FramingReceiver) for r in self.replicas):
            adv["framing"] = {"forged": sum(len(r.forged) for r in self.replicas if isinstance(r, FramingReceiver)),
                              "checked": self.forged_checks, "accepted": self.forged_accepted}
        if self.forger is not None:
            self.forger.adopted(honest)
            adv["long_range"] = self.forger.tally.to_dict()
        if self.dos_at is not None:
            adv["relay_dos"] = {"at_us": self.dos_at, "blocks_after": sum(
                1 for h, t in obs.finalized_at.items() if t >= self.dos_at)}
        eq = [r for r in self.replicas if isinstance(r, EquivocatingLeader)]
        if eq:
            adv["equivocation"] = {"proposals": sum(r.equivocated for r in eq), "detected": m.equivocations}
        m.adversaries = adv
        m.events = self.events
        m.end_time_us = self.now
        m.stopped_early = self.stopped
        return m

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.trace_records)

    def pools_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time_us", "sender", "receiver", "evidence_bits", "consensus_bits", "generated_bits"])
        w.writerows(self.pool_rows)
        return buf.getvalue()


def run(cfg: ScenarioConfig) -> RunMetrics:
    return Simulation(cfg).run()


def run_with_outputs(cfg: ScenarioConfig, out_dir: str | Path | None = None) -> tuple[RunMetrics, Simulation]:
    sim = Simulation(cfg)
    metrics = sim.run()
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "metrics.json").write_text(metrics.to_json() + "\n")
        (d / "trace.jsonl").write_text(sim.trace_jsonl())
        (d / "pools.csv").write_text(sim.pools_csv())
    return metrics, sim


class BracketError(ValueError):
    pass


@dataclass(frozen=True)
class SustainedResult:
    tps: float
    low: float
    high: float
    history: tuple[tuple[float, bool], ...]


def sustained_tps(cfg: ScenarioConfig, low: float, high: float, iterations: int = 8) -> SustainedResult:
    """Largest offered load that neither exhausts a pool nor leaves transactions unfinalized."""
    if iterations < 8:
        raise ValueError("the search runs at least 8 iterations")
    base = cfg.with_(stop_on_exhaustion=True, trace=False, online_audit=False, pool_sample_ms=0.0,
                     conservation_every_event=False)
    history = []

    def ok(tps: float) -> bool:
        res = run(base.with_(offered_tps=tps)).sustainable
        history.append((tps, res))
        return res

    if not ok(low):
        raise BracketError(f"load {low} is already unsustainable")
    if ok(high):
        raise BracketError(f"load {high} is still sustainable")
    lo, hi = low, high
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return SustainedResult(lo, lo, hi, tuple(history))


__all__ = [
    "BracketError",
    "RunMetrics",
    "Simulation",
    "SustainedResult",
    "link_supply_bps",
    "run",
    "run_with_outputs",
    "sustained_tps",
]
