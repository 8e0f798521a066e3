from __future__ import annotations

from collections import deque
from dataclasses import replace

import pytest

from qrchain.consensus import (
    ConsensusConfig,
    ConsensusMessage,
    Kind,
    Replica,
    TxMessage,
    finality_check,
    quorum_intersection,
)
from qrchain.errors import KeyErased
from qrchain.keystore import build_network_keystores
from qrchain.sim.config import Adversary, ConsensusTiming, DelayModel, ScenarioConfig
from qrchain.sim.harness import Simulation, run

MS = 1000


class Net:
    """Instant FIFO delivery, no clock beyond what the test passes in."""

    def __init__(self, n=4, f=1, seed_bits=1 << 16, **cfg):
        self.cfg = ConsensusConfig(n, f, **cfg)
        self.stores = build_network_keystores(n, b"consensus-test", seed_bits=seed_bits, evidence_ratio=0.5)
        self.replicas = [Replica(i, self.cfg, self.stores[i], 1000) for i in range(n)]
        self.queue = deque()
        self.down: set[int] = set()
        self.log: list = []

    def send(self, src, outs):
        for dst, msg in outs:
            self.queue.append((src, dst, msg))

    def drain(self, now, limit=100_000):
        while self.queue and limit:
            limit -= 1
            src, dst, msg = self.queue.popleft()
            self.log.append((src, dst, msg))
            if dst in self.down:
                continue
            self.send(dst, self.replicas[dst].on_message(msg, src, now))

    def submit(self, sender, receiver, amount, now):
        tx, outs = self.replicas[sender].create_transaction(receiver, amount, now)
        self.send(sender, outs)
        self.drain(now)
        return tx

    def fire(self, now):
        for r in self.replicas:
            if r.rid not in self.down:
                self.send(r.rid, r.on_timer(now))
        self.drain(now)


def test_quorum_intersection_contains_an_honest_replica():
    for n in range(4, 13):
        f = (n - 1) // 3
        cfg = ConsensusConfig(n, f)
        q = cfg.quorum
        assert q >= 2 * f + 1 and q <= n - f  # safe and live
        assert quorum_intersection(n, q) >= f + 1
    assert ConsensusConfig(4, 1).quorum == 3
    assert quorum_intersection(3, ConsensusConfig(3, 1, unsafe=True).quorum) == 1  # can be the faulty one
    with pytest.raises(ValueError):
        ConsensusConfig(3, 1)


def test_leader_rotation_and_backoff():
    cfg = ConsensusConfig(4, 1, base_timeout=100)
    assert [cfg.leader(v) for v in range(6)] == [0, 1, 2, 3, 0, 1]
    assert [cfg.timeout(k) for k in range(4)] == [100, 200, 400, 800]
    assert cfg.timeout(400) == cfg.timeout(16)


def test_happy_path_all_finalize_same_block():
    net = Net()
    txs = [net.submit(1, 2, 5, 0), net.submit(2, 3, 1, 0), net.submit(3, 0, 2, 0)]
    leader = net.replicas[0]
    assert all(r._maybe_propose(0) == [] for r in net.replicas[1:])  # non-leaders never propose
    net.fire(net.cfg.batch_wait)
    props = [m for _, _, m in net.log if isinstance(m, ConsensusMessage) and m.kind == Kind.PROPOSAL]
    assert len({m.digest for m in props}) == 1 and len(props[0].block.transactions) == 3
    assert {r.chain.height for r in net.replicas} == {1}
    assert len({r.chain.tip.digest for r in net.replicas}) == 1
    assert [t.tx_id for t in leader.chain.tip.transactions] == [t.tx_id for t in txs]
    for r in net.replicas:
        cert = r.certificates[1]
        assert len(cert.voters) >= net.cfg.quorum
        assert r.state.balances[2] == 1000 - 1 + 5
        assert r.view == 0 and r.stats["views_entered"] == 0
    assert finality_check(net.replicas).ok
    assert sum(r.stats["acted"] for r in net.replicas) == sum(r.stats["verified"] for r in net.replicas)


def test_duplicate_vote_counted_once():
    net = Net()
    net.submit(1, 2, 5, 0)
    prop = {d: m for d, m in net.replicas[0]._maybe_propose(net.cfg.batch_wait) if m.kind == Kind.PROPOSAL}
    r1, target = net.replicas[1], net.replicas[2]
    target.on_message(prop[2], 0, 0)
    d = target.inst.proposals[0]
    prepares = dict(r1.on_message(prop[1], 0, 0))
    assert prepares[2].kind == Kind.PREPARE
    before = len(target.inst.prepares[(0, d)])
    target.on_message(prepares[2], 1, 0)
    target.on_message(prepares[2], 1, 0)  # replayed copy: its key is already erased
    assert len(target.inst.prepares[(0, d)]) == before + 1
    assert target.stats["dropped_erased_key"] == 1
    # a second, freshly keyed prepare from the same voter is still one vote
    again = r1._send(Kind.PREPARE, 1, 0, d, None, [2], single=True)
    target.on_message(again[0][1], 1, 0)
    assert len(target.inst.prepares[(0, d)]) == before + 1


def test_unverified_messages_are_dropped_before_acting():
    net = Net()
    net.submit(1, 2, 5, 0)
    prop = net.replicas[0]._maybe_propose(net.cfg.batch_wait)
    _, msg = next(p for p in prop if p[0] == 1)
    r1 = net.replicas[1]
    forged = [replace(msg, tag=msg.tag ^ 1), replace(msg, view=msg.view + 4), replace(msg, recipient=2),
              replace(msg, sender=2), "not a message"]
    for bad in forged:
        assert r1.on_message(bad, 0, 0) == []
    assert r1.stats["verified"] == 0 and r1.stats["acted"] == 0
    assert r1.inst.proposals == {}
    assert r1.stats["dropped_bad_tag"] >= 2
    # the genuine message still verifies afterwards: failed checks do not burn the key
    assert r1.on_message(msg, 0, 0)
    assert r1.stats["acted"] == 1


def test_keys_erased_after_finalization():
    net = Net()
    net.submit(1, 2, 5, 0)
    net.fire(net.cfg.batch_wait)
    for r in net.replicas:
        assert r.chain.height == 1
        assert not r.bundles and not r.recv_bundles
        for j, pool in r.store.outgoing.items():
            head = pool.consensus.head
            assert head > 0
            for i in range(head):
                with pytest.raises(KeyErased):
                    pool.consensus_pair(i)
    # every consensus key a message used at the receiver is gone as well
    for src, dst, msg in net.log:
        if isinstance(msg, ConsensusMessage):
            with pytest.raises(KeyErased):
                net.replicas[dst].store.incoming[src].consensus_pair(msg.key_index)


def test_equivocation_detected_and_view_changes():
    net = Net()
    net.submit(1, 2, 5, 0)
    net.submit(1, 3, 5, 0)
    leader = net.replicas[0]
    txs = leader._select_txs()
    from qrchain.ledger import make_block

    a = make_block(1, leader.chain.tip.digest, 0, 0, txs, leader._collect_evidence())
    b = make_block(1, leader.chain.tip.digest, 0, 0, txs[:1], leader._collect_evidence())
    outs = (leader._send(Kind.PROPOSAL, 1, 0, a.digest, a, [1, 2])
            + leader._send(Kind.PROPOSAL, 1, 0, b.digest, b, [3]))
    net.down.add(0)
    net.send(0, outs)
    net.drain(net.cfg.batch_wait)
    # each side sees the other block in the prepares, flags the leader and moves on
    for r in net.replicas[1:]:
        assert r.flagged == {0} and r.view == 1
        assert r.stats["proposals_deferred"] == 0
    assert finality_check(net.replicas).ok
    assert not any(r.chain.height and r.chain.tip.digest == b.digest for r in net.replicas)


def _sim(**kw):
    base = dict(n=4, f=1, offered_tps=10, duration_s=3, drain_s=4, seed=1, trace=True, pool_sample_ms=0)
    base.update(kw)
    return Simulation(ScenarioConfig(**base))


def test_no_view_change_when_blocks_flow():
    m = _sim().run()
    assert m.view_changes == 0 and m.max_view == 0
    assert m.liveness["ok"] and m.safe


def test_crashed_leader_view_advances_within_two_timeouts():
    sim = _sim(adversaries=(Adversary("silent_replica", 0),), offered_tps=5)
    m = sim.run()
    base = sim.ccfg.base_timeout
    obs = sim.observer.rid
    first_tx = min(rec["created"] for rec in sim.submitted.values())
    entered = min(r["t"] for r in sim.trace_records if r["event"] == "enter_view" and r["replica"] == obs)
    assert entered - first_tx <= 2 * base
    assert m.finalized_blocks >= 1 and m.safe
    assert m.liveness["ok"]


def test_censored_transaction_finalizes_after_rotation():
    sim = _sim(adversaries=(Adversary("censoring_leader", 0, {"targets": [1]}),))
    m = sim.run()
    censored = [k for k in sim.submitted if k[0] == 1]
    assert censored and all(sim.submitted[k]["final"] is not None for k in censored)
    assert m.liveness["max_view_changes_per_tx"] <= m.f + 1
    assert m.safe and m.liveness["honest_unfinalized"] == 0
    # no block proposed by the censor contains a target transaction
    for b in sim.observer.chain.blocks[1:]:
        if b.header.proposer == 0:
            assert all(t.sender != 1 for t in b.transactions)


def test_equivocating_leader_sweep_is_safe():
    for seed in range(10):
        m = run(ScenarioConfig(n=4, f=1, offered_tps=15, duration_s=1.5, drain_s=2.5, seed=seed, trace=False,
                               delay=DelayModel("uniform", min_ms=1, max_ms=20), pool_sample_ms=0,
                               consensus=ConsensusTiming(base_timeout_ms=250, batch_wait_ms=150, tx_timeout_ms=600),
                               adversaries=(Adversary("equivocating_leader", 0),)))
        assert m.safe, seed
        assert m.adversaries["equivocation"]["proposals"] > 0
        assert m.messages["acted_unverified"] == 0


def test_below_three_f_plus_one_violations_become_reachable():
    bad = 0
    for seed in range(10):
        m = run(ScenarioConfig(n=3, f=1, unsafe_quorum=True, safety_labeled=True, offered_tps=15, duration_s=1,
                               drain_s=1, seed=seed, trace=False, pool_sample_ms=0,
                               adversaries=(Adversary("equivocating_leader", 0),)))
        bad += not m.safe
    assert bad > 0


def test_exhausted_consensus_pool_defers_proposal():
    net = Net(seed_bits=64 * 8)
    net.submit(1, 2, 5, 0)
    leader = net.replicas[0]
    for pool in leader.store.outgoing.values():
        while pool.consensus.available_keys:
            pool.reserve_consensus()
    assert leader._maybe_propose(net.cfg.batch_wait) == []
    assert leader.stats["proposals_deferred"] == 1
    assert leader.next_deadline() is None or leader._propose_time() is None


def test_finality_check_reports_divergence():
    net = Net()
    net.submit(1, 2, 5, 0)
    net.fire(net.cfg.batch_wait)
    other = Net()
    other.submit(1, 2, 6, 0)
    other.fire(other.cfg.batch_wait)
    mixed = net.replicas[:2] + other.replicas[2:]
    verdict = finality_check(mixed)
    assert not verdict.ok and verdict.violations[0][0] == 1
