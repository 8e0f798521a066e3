"""BFT replica state machine with consensus-stratum Wegman-Carter vote tags.

Each replica is driven only by ``on_message``, ``on_timer`` and
``create_transaction``; it never reads a clock, it is handed ``now`` (integer
microseconds).  Outputs are ``(recipient, message)`` pairs for the harness.

Protocol outline, per height:

* the leader of view ``v`` (``v mod n``) sends a proposal; every message of the
  (height, view) instance uses one slot of a bundle of ``P`` consecutive
  consensus keys that the sender reserves towards each peer on first send;
* a replica prepares at most once per view, only when unlocked, locked on the
  same digest, or after seeing a prepare quorum for the proposal at a view later
  than its lock;
* ``q`` prepares lead to a commit (which sets the lock), ``f+1`` commits in the
  current view are echoed, ``q`` commits for one (view, digest) finalize;
* timeouts trigger view changes that carry the sender's lock; ``f+1`` view
  changes are joined, ``q`` start the new view, whose leader re-proposes the
  highest lock it knows or a fresh block.

Every consensus message is verified against the receiver's own pairwise key
before anything else looks at it, and that key is erased right after a
successful verification.
"""
from __future__ import annotations

import hashlib
import heapq
import math
import struct
from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field
from enum import IntEnum
from itertools import combinations
from typing import Callable, NamedTuple

from .auth.wc import build_vector, make_tag, verify_tag
from .errors import KeyErased, KeyExhausted
from .keystore import EvidencePayload, NodeKeyStore, extract_evidence_payload
from .ledger import (
    ZERO_HASH,
    AccountState,
    Block,
    Chain,
    CommitCertificate,
    InvalidBlock,
    Payment,
    Transaction,
    apply_block,
    check_tag,
    make_block,
    validate_transaction,
    validate_transactions,
)


@dataclass(frozen=True)
class ConsensusConfig:
    n: int
    f: int
    base_timeout: int = 1_000_000
    timeout_backoff: float = 2.0
    block_size: int = 2500
    rounds: int = 3
    batch_wait: int = 200_000
    evidence_wait: int = 50_000
    tx_timeout: int = 3_000_000
    unsafe: bool = False

    def __post_init__(self) -> None:
        if self.n < 2 or self.f < 0:
            raise ValueError("need n >= 2 and f >= 0")
        if self.n < 3 * self.f + 1 and not self.unsafe:
            raise ValueError(f"n={self.n} violates n >= 3f+1 for f={self.f}")
        if self.rounds < 3:
            raise ValueError("a bundle needs a slot for proposal, prepare and commit")

    @property
    def quorum(self) -> int:
        if self.unsafe:
            return self.n - self.f
        return max(2 * self.f + 1, math.ceil((self.n + self.f + 1) / 2))

    def leader(self, view: int) -> int:
        return view % self.n

    def timeout(self, k: int) -> int:
        return int(self.base_timeout * self.timeout_backoff ** min(k, 16))


def quorum_intersection(n: int, q: int) -> int:
    """Smallest overlap of two q-subsets of n replicas, checked by enumeration for small n."""
    if n <= 12:
        sets = [frozenset(c) for c in combinations(range(n), q)]
        first = sets[0]
        return min(len(first & s) for s in sets)
    return max(0, 2 * q - n)


class Kind(IntEnum):
    PROPOSAL = 1
    PREPARE = 2
    COMMIT = 3
    VIEW_CHANGE = 4
    NEW_VIEW = 5


SLOT = {Kind.PROPOSAL: 0, Kind.NEW_VIEW: 0, Kind.PREPARE: 1, Kind.COMMIT: 2}


@dataclass(frozen=True)
class ConsensusMessage:
    kind: Kind
    view: int
    height: int
    digest: bytes
    sender: int
    recipient: int
    key_index: int
    tag: int
    block: Block | None = None
    lock_view: int = -1
    bundle: bool = True

    def auth_bytes(self) -> bytes:
        """Tagged encoding: kind u8, view u32, height u32, digest (32 bytes), sender u16, recipient u16,
        lock_view i32, bundle flag u8.  The block itself is bound through the digest."""
        if len(self.digest) != 32:
            raise ValueError("digest must be 32 bytes")
        return (struct.pack(">BII", self.kind, self.view, self.height) + self.digest
                + struct.pack(">HHiB", self.sender, self.recipient, self.lock_view, self.bundle))


@dataclass(frozen=True)
class TxMessage:
    tx: Transaction


@dataclass(frozen=True)
class EvidenceMessage:
    sender: int
    payload: EvidencePayload


class Verified(NamedTuple):
    msg: ConsensusMessage


@dataclass
class Instance:
    height: int
    blocks: dict[bytes, Block] = field(default_factory=dict)
    valid: dict[bytes, bool] = field(default_factory=dict)
    proposals: dict[int, bytes] = field(default_factory=dict)
    prepares: dict[tuple[int, bytes], set[int]] = field(default_factory=lambda: defaultdict(set))
    commits: dict[tuple[int, bytes], dict[int, tuple[int, int]]] = field(default_factory=lambda: defaultdict(dict))
    prepared_views: set[int] = field(default_factory=set)
    committed_views: set[int] = field(default_factory=set)
    proposed_views: set[int] = field(default_factory=set)
    bad_views: set[int] = field(default_factory=set)
    lock: tuple[int, bytes] | None = None
    polka: tuple[int, bytes] | None = None
    vc: dict[int, dict[int, tuple[int, bytes]]] = field(default_factory=lambda: defaultdict(dict))
    peer_view: dict[int, int] = field(default_factory=dict)
    peer_vc: dict[int, int] = field(default_factory=dict)
    proposal_time: int | None = None


@dataclass
class PendingTx:
    tx: Transaction
    arrival: int


TraceFn = Callable[[dict], None]


class Replica:
    honest = True
    issues_transactions = True

    def __init__(self, rid: int, cfg: ConsensusConfig, store: NodeKeyStore, balances, *,
                 trace: TraceFn | None = None) -> None:
        self.rid = rid
        self.cfg = cfg
        self.store = store
        self.chain = Chain.new(cfg.n, balances, store.bits)
        self.state = AccountState.genesis(cfg.n, self.chain.initial_balances)
        self.view = 0
        self.view_start = 0
        self.vc_target: int | None = None
        self.vc_time = 0
        self.failures = 0
        self.inst = Instance(1)
        self.mempool: OrderedDict[tuple[int, int], list[PendingTx]] = OrderedDict()
        self.next_ctr = 0
        self.evidence: dict[int, dict[int, EvidencePayload]] = defaultdict(dict)
        self.buffer: dict[int, list[Verified]] = defaultdict(list)
        self.decided: dict[int, tuple[bytes, Block, int]] = {}
        self.replied: set[tuple[int, int, int]] = set()
        self.bundles: dict[tuple[int, int], dict[int, list]] = {}
        self.recv_bundles: dict[int, set[tuple[int, int]]] = defaultdict(set)
        self.last_finalize = 0
        self.certificates: dict[int, CommitCertificate] = {}
        self.finalized_at: dict[int, int] = {}
        self.flagged: set[int] = set()
        self.equivocations: list[tuple[int, int, int]] = []
        self.stats: dict[str, int] = defaultdict(int)
        self._trace = trace
        self.on_tx_checked: Callable[["Replica", Transaction, bool], None] | None = None
        self._idle_mark: tuple[int, int, int] | None = None
        self._starved = False
        self._tip_index: tuple[int, tuple] = (-1, (set(), set()))
        self._ev_checked: dict[int, set] = defaultdict(set)  # entries already matched against own keys

    # -- helpers -----------------------------------------------------------------------------

    @property
    def n(self) -> int:
        return self.cfg.n

    @property
    def height(self) -> int:
        return self.inst.height

    def peers(self) -> list[int]:
        return [j for j in range(self.n) if j != self.rid]

    def is_leader(self, view: int | None = None) -> bool:
        return self.cfg.leader(self.view if view is None else view) == self.rid

    def trace(self, now: int, event: str, **kw) -> None:
        if self._trace is not None:
            rec = {"t": now, "replica": self.rid, "event": event, "view": self.view, "height": self.height}
            for k, v in kw.items():
                rec[k] = v.hex()[:16] if isinstance(v, bytes) else v
            self._trace(rec)

    def _key_for(self, kind: Kind, height: int, view: int, peer: int):
        """Next key pair for a message of ``kind`` to ``peer``; may raise KeyExhausted."""
        if kind in SLOT:
            bundle = self.bundles.get((height, view))
            if bundle is None:
                bundle = self.store.reserve_consensus_all(self.cfg.rounds)
                self.bundles[(height, view)] = bundle
            return bundle[peer][SLOT[kind]], True
        return self.store.outgoing[peer].reserve_consensus(), False

    def _send(self, kind: Kind, height: int, view: int, digest: bytes, block: Block | None,
              recipients: list[int], lock_view: int = -1, single: bool = False) -> list | None:
        out = []
        try:
            if single:
                keys = {j: (self.store.outgoing[j].reserve_consensus(), False) for j in recipients}
            elif kind in SLOT:
                keys = {j: self._key_for(kind, height, view, j) for j in recipients}
            else:
                if not all(self.store.outgoing[j].consensus.available_keys >= 1 for j in recipients):
                    raise KeyExhausted("consensus keys exhausted")
                keys = {j: (self.store.outgoing[j].reserve_consensus(), False) for j in recipients}
        except KeyExhausted:
            # nothing can be sent until fresh key material arrives; the harness pokes us on every tick
            self._starved = True
            self.stats["deferred_sends"] += 1
            self.stats["key_exhausted"] += 1
            return None
        for j in recipients:
            kp, in_bundle = keys[j]
            proto = ConsensusMessage(kind, view, height, digest, self.rid, j, kp.index, 0, block, lock_view, in_bundle)
            tag = make_tag(kp.k_hash, kp.k_otp, proto.auth_bytes(), kp.index).value
            out.append((j, ConsensusMessage(kind, view, height, digest, self.rid, j, kp.index, tag, block,
                                            lock_view, in_bundle)))
        self.stats[f"sent_{kind.name.lower()}"] += len(out)
        return out

    # -- transactions --------------------------------------------------------------------------

    def create_transaction(self, receiver: int, amount: int, now: int) -> tuple[Transaction, list]:
        ctr = self.next_ctr
        keys = self.store.reserve_evidence_all(ctr)  # KeyExhausted propagates: sender backpressure
        pay = Payment(self.rid, receiver, amount, now)
        tx = Transaction(self.rid, ctr, pay, build_vector(self.rid, self.n, keys, pay.to_bytes(), ctr, self.store.bits))
        self.next_ctr += 1
        self._add_tx(tx, now)
        return tx, [(j, TxMessage(tx)) for j in self.peers()]

    def _add_tx(self, tx: Transaction, now: int) -> None:
        if tx.ctr < self.state.next_ctr.get(tx.sender, 0):
            return
        key = tx.tx_id
        cands = self.mempool.get(key)
        if cands is None:
            self.mempool[key] = [PendingTx(tx, now)]
        elif all(c.tx != tx for c in cands):
            # a conflicting copy: screen its tag now so a forgery never displaces the real one
            verdict = check_tag(tx, self.rid, self.cfg.n, self.store)
            if self.on_tx_checked is not None:
                self.on_tx_checked(self, tx, verdict.accepted)
            if verdict:
                cands.append(PendingTx(tx, now))
            else:
                self.stats["dropped_bad_tx"] += 1

    def oldest_pending(self) -> int | None:
        for cands in self.mempool.values():
            return cands[0].arrival
        return None

    def _eligible(self, tx: Transaction) -> bool:
        return True

    def _select_txs(self) -> list[Transaction]:
        """FIFO by first arrival, in counter order per sender, each validated at this replica."""
        scratch = self.state.copy()
        per_sender: dict[int, list[tuple[int, tuple[int, int]]]] = defaultdict(list)
        for key, cands in self.mempool.items():
            if self._eligible(cands[0].tx):
                per_sender[key[0]].append((key[1], key))
        rank = {key: i for i, key in enumerate(self.mempool)}
        for lst in per_sender.values():
            lst.sort()
        heads = []
        pos = {s: 0 for s in per_sender}
        for s, lst in per_sender.items():
            heapq.heappush(heads, (rank[lst[0][1]], s))
        out: list[Transaction] = []
        drop = []
        while heads and len(out) < self.cfg.block_size:
            _, s = heapq.heappop(heads)
            lst = per_sender[s]
            ctr, key = lst[pos[s]]
            if ctr != scratch.next_ctr[s]:
                continue  # gap: wait for the missing counter
            chosen = None
            for cand in self.mempool[key]:
                verdict = validate_transaction(scratch, cand.tx, self.rid, self.store)
                if self.on_tx_checked is not None:
                    self.on_tx_checked(self, cand.tx, verdict.accepted)
                if verdict:
                    chosen = cand.tx
                    break
                drop.append((key, cand))
            if chosen is None:
                continue
            scratch.apply_tx(chosen)
            out.append(chosen)
            pos[s] += 1
            if pos[s] < len(lst):
                heapq.heappush(heads, (rank[lst[pos[s]][1]], s))
        for key, cand in drop:
            cands = self.mempool.get(key)
            if cands and cand in cands:
                cands.remove(cand)
                if not cands:
                    del self.mempool[key]
        return out

    # -- evidence ------------------------------------------------------------------------------

    def _evidence_ok(self, payload: EvidencePayload, height: int, source: int | None = None) -> bool:
        if height < 1 or height > self.chain.height:
            return height == 0 and not payload.entries
        txids = self._block_index(height)[1]
        checked = self._ev_checked[height]
        for e in payload.entries:
            if (e.sender, e.ctr) not in txids or (source is not None and e.sender != source):
                return False
            if e in checked:
                continue
            if [p for p, _, _ in e.keys] != [j for j in range(self.n) if j != e.sender]:
                return False
            try:
                if e.sender == self.rid:
                    for p, kh, ko in e.keys:
                        kp = self.store.outgoing[p].evidence_pair(e.ctr)
                        if (kp.k_hash.value, kp.k_otp.value) != (kh, ko):
                            return False
                else:
                    kp = self.store.incoming[e.sender].evidence_pair(e.ctr)
                    if e.key_for(self.rid) != (kp.k_hash.value, kp.k_otp.value):
                        return False
            except KeyErased:
                return False
            checked.add(e)
        return True

    def _collect_evidence(self) -> EvidencePayload:
        h = self.chain.height
        out = EvidencePayload(h, (), self.store.bits)
        for s in sorted(self.evidence.get(h, {})):
            p = self.evidence[h][s]
            if self._evidence_ok(p, h, s):
                out = out.merged(p)
        return out

    def _block_index(self, h: int) -> tuple[set[int], set[tuple[int, int]]]:
        """Senders and tx ids of finalized block ``h``; the tip's are cached."""
        if self._tip_index[0] == h:
            return self._tip_index[1]
        txs = self.chain.blocks[h].transactions
        idx = ({t.sender for t in txs}, {t.tx_id for t in txs})
        if h == self.chain.height:
            self._tip_index = (h, idx)
        return idx

    def _tip_senders(self) -> set[int]:
        return self._block_index(self.chain.height)[0]

    def on_evidence(self, msg: EvidenceMessage, source: int, now: int) -> list:
        p = msg.payload
        if source != msg.sender or any(e.sender != source for e in p.entries):
            self.stats["evidence_rejected"] += 1
            return []
        if p.block_height > self.chain.height or self._evidence_ok(p, p.block_height, source):
            self.evidence[p.block_height][source] = p
        else:
            self.stats["evidence_rejected"] += 1
        return self._maybe_propose(now)

    # -- proposal ------------------------------------------------------------------------------

    def _valid_value(self) -> tuple[int, bytes] | None:
        """Highest locked block this replica knows of at the current height."""
        inst = self.inst
        best = None
        cands = []
        if inst.lock:
            cands.append(inst.lock)
        if inst.polka:
            cands.append(inst.polka)
        for t, senders in inst.vc.items():
            if t <= self.view:
                for lv, d in senders.values():
                    if lv >= 0:
                        cands.append((lv, d))
        for lv, d in cands:
            if d in inst.blocks and self._block_valid(inst.blocks[d]) and (best is None or lv > best[0]):
                best = (lv, d)
        return best

    def _propose_time(self) -> int | None:
        if not self.is_leader() or self.vc_target is not None or self.view in self.inst.proposed_views:
            return None
        if self._starved or self._idle_mark == (self.height, self.view, len(self.mempool)):
            return None
        if self._valid_value() is not None:
            return 0
        oldest = self.oldest_pending()
        if oldest is None:
            return None
        ready = oldest + self.cfg.batch_wait
        if len(self.mempool) >= self.cfg.block_size:
            ready = 0
        ev = self.last_finalize + self.cfg.evidence_wait if self.chain.height else 0
        return max(ready, min(ev, self._evidence_eta()))

    def _evidence_eta(self) -> int:
        # 0 when everything needed is already here
        h = self.chain.height
        if h == 0:
            return 0
        return 0 if self._tip_senders() <= self.evidence.get(h, {}).keys() else self.last_finalize + self.cfg.evidence_wait

    def _maybe_propose(self, now: int) -> list:
        t = self._propose_time()
        if t is None or now < t:
            return []
        inst, v = self.inst, self.view
        vv = self._valid_value()
        if vv is not None:
            block = inst.blocks[vv[1]]
        else:
            txs = self._select_txs()
            if not txs:
                self._idle_mark = (self.height, self.view, len(self.mempool))
                return []
            block = make_block(self.height, self.chain.tip.digest, self.rid, v, txs, self._collect_evidence())
        return self._broadcast_proposal(block, now)

    def _broadcast_proposal(self, block: Block, now: int) -> list:
        inst, v = self.inst, self.view
        kind = Kind.NEW_VIEW if v > 0 and inst.vc.get(v) else Kind.PROPOSAL
        out = self._send(kind, self.height, v, block.digest, block, self.peers())
        if out is None:
            self._starved = True
            self.stats["proposals_deferred"] += 1
            self.trace(now, "proposal_deferred")
            return []
        inst.proposed_views.add(v)
        inst.blocks[block.digest] = block
        inst.valid[block.digest] = True
        inst.proposals[v] = block.digest
        inst.proposal_time = now
        self.trace(now, "propose", digest=block.digest, txs=len(block.transactions))
        return out + self._try_prepare(v, block.digest, now)

    # -- block validity ------------------------------------------------------------------------

    def _block_valid(self, block: Block) -> bool:
        d = block.digest
        cached = self.inst.valid.get(d)
        if cached is not None:
            return cached
        ok = self._check_block(block)
        self.inst.valid[d] = ok
        if not ok:
            self.stats["invalid_blocks"] += 1
        return ok

    def _check_block(self, block: Block) -> bool:
        h = block.header
        if h.height != self.height or h.prev_hash != self.chain.tip.digest or not block.body_ok():
            return False
        if h.proposer != self.cfg.leader(h.view):
            return False
        if not self._evidence_ok(block.evidence_for_previous, self.chain.height):
            return False
        verdicts = validate_transactions(self.state, block.transactions, self.rid, self.store)
        if self.on_tx_checked is not None:
            for tx, v in zip(block.transactions, verdicts):
                self.on_tx_checked(self, tx, v.accepted)
        return all(verdicts)

    # -- message handling ------------------------------------------------------------------------

    def on_message(self, msg, source: int, now: int) -> list:
        if isinstance(msg, TxMessage):
            self._add_tx(msg.tx, now)
            return self._maybe_propose(now)
        if isinstance(msg, EvidenceMessage):
            return self.on_evidence(msg, source, now)
        if not isinstance(msg, ConsensusMessage):
            self.stats["dropped_malformed"] += 1
            return []
        self.stats["received"] += 1
        v = self._verify(msg)
        if v is None:
            return []
        return self._dispatch(v, now)

    def _verify(self, msg: ConsensusMessage) -> Verified | None:
        pool = self.store.incoming.get(msg.sender)
        if msg.recipient != self.rid or pool is None:
            self.stats["dropped_misrouted"] += 1
            return None
        try:
            kp = pool.consensus_pair(msg.key_index)
        except KeyErased:
            self.stats["dropped_unverified"] += 1
            self.stats["dropped_erased_key"] += 1
            return None
        if not verify_tag(kp.k_hash, kp.k_otp, msg.auth_bytes(), msg.key_index, msg.tag):
            self.stats["dropped_unverified"] += 1
            self.stats["dropped_bad_tag"] += 1
            return None
        pool.erase_consensus_key(msg.key_index)
        self.stats["verified"] += 1
        if msg.block is not None and msg.block.digest != msg.digest:
            self.stats["dropped_malformed"] += 1
            return None
        if msg.bundle and msg.kind in SLOT:
            base = msg.key_index - SLOT[msg.kind]
            if msg.height <= self.chain.height:
                self._erase_bundle(msg.sender, base)
            else:
                self.recv_bundles[msg.height].add((msg.sender, base))
        return Verified(msg)

    def _erase_bundle(self, sender: int, base: int) -> None:
        pool = self.store.incoming[sender]
        for i in range(self.cfg.rounds):
            pool.erase_consensus_key(base + i)

    def _dispatch(self, v: Verified, now: int) -> list:
        if not isinstance(v, Verified):
            self.stats["acted_unverified"] += 1
            return []
        msg = v.msg
        if msg.height > self.height:
            if msg.height <= self.height + 16:
                self.buffer[msg.height].append(v)
            return []
        self.stats["acted"] += 1
        if msg.height <= self.chain.height:
            return self._decided_reply(msg, now)
        inst = self.inst
        if msg.block is not None:
            inst.blocks.setdefault(msg.digest, msg.block)
        out: list = []
        if msg.kind == Kind.VIEW_CHANGE:
            inst.vc[msg.view][msg.sender] = (msg.lock_view, msg.digest)
            inst.peer_vc[msg.sender] = max(inst.peer_vc.get(msg.sender, -1), msg.view)
            return self._on_view_change(now)
        inst.peer_view[msg.sender] = max(inst.peer_view.get(msg.sender, -1), msg.view)
        if msg.kind in (Kind.PROPOSAL, Kind.NEW_VIEW):
            if msg.sender != self.cfg.leader(msg.view):
                self.stats["dropped_wrong_leader"] += 1
                return []
            out += self._note_proposal(msg.view, msg.digest, msg.sender, now)
            if msg.view == self.view and inst.proposal_time is None:
                inst.proposal_time = now
            out += self._try_prepare(msg.view, msg.digest, now)
        elif msg.kind == Kind.PREPARE:
            if msg.block is not None:
                out += self._check_equivocation(msg.view, msg.block, now)
            inst.prepares[(msg.view, msg.digest)].add(msg.sender)
            out += self._on_prepares(msg.view, msg.digest, now)
        elif msg.kind == Kind.COMMIT:
            if msg.block is not None:
                out += self._check_equivocation(msg.view, msg.block, now)
            inst.commits[(msg.view, msg.digest)][msg.sender] = (msg.key_index, msg.tag)
            out += self._on_commits(msg.view, msg.digest, now)
        if self.inst is inst:
            out += self._maybe_skip(now)
        return out

    def _check_equivocation(self, view: int, block: Block, now: int) -> list:
        hdr = block.header
        if hdr.view == view and hdr.proposer == self.cfg.leader(view):
            return self._note_proposal(view, block.digest, hdr.proposer, now, direct=False)
        return []

    def _note_proposal(self, view: int, digest: bytes, leader: int, now: int, direct: bool = True) -> list:
        inst = self.inst
        prev = inst.proposals.get(view)
        if prev is None:
            if direct:
                inst.proposals[view] = digest
            return []
        if prev == digest or view in inst.bad_views:
            return []
        inst.bad_views.add(view)
        self.flagged.add(leader)
        self.equivocations.append((self.height, view, leader))
        self.stats["equivocations"] += 1
        self.trace(now, "equivocation", leader=leader, digest=digest)
        if view == self.view and self.vc_target is None:
            return self._start_view_change(self.view + 1, now)
        return []

    def _lock_allows(self, digest: bytes, view: int) -> bool:
        inst = self.inst
        if inst.lock is None or inst.lock[1] == digest:
            return True
        # a prepare quorum for this digest at a view after our lock releases it
        for (pv, d), voters in inst.prepares.items():
            if d == digest and inst.lock[0] < pv <= view and len(voters) >= self.cfg.quorum:
                return True
        return False

    def _try_prepare(self, view: int, digest: bytes, now: int) -> list:
        inst = self.inst
        if (view != self.view or self.vc_target is not None or view in inst.prepared_views
                or view in inst.bad_views or inst.proposals.get(view) != digest or digest not in inst.blocks):
            return []
        if not self._block_valid(inst.blocks[digest]) or not self._lock_allows(digest, view):
            return []
        out = self._send(Kind.PREPARE, self.height, view, digest, inst.blocks[digest], self.peers())
        if out is None:
            return []
        inst.prepared_views.add(view)
        inst.prepares[(view, digest)].add(self.rid)
        self.trace(now, "prepare", digest=digest)
        return out + self._on_prepares(view, digest, now)

    def _on_prepares(self, view: int, digest: bytes, now: int) -> list:
        inst = self.inst
        if len(inst.prepares[(view, digest)]) < self.cfg.quorum:
            return []
        if inst.polka is None or view > inst.polka[0]:
            inst.polka = (view, digest)
        out = self._try_prepare(view, digest, now)  # a quorum may release our lock
        if self.inst is not inst:
            return out
        return out + self._try_commit(view, digest, now)

    def _try_commit(self, view: int, digest: bytes, now: int) -> list:
        inst = self.inst
        if (view != self.view or self.vc_target is not None or view in inst.committed_views
                or digest not in inst.blocks or not self._block_valid(inst.blocks[digest])):
            return []
        out = self._send(Kind.COMMIT, self.height, view, digest, inst.blocks[digest], self.peers())
        if out is None:
            return []
        inst.lock = (view, digest)
        inst.committed_views.add(view)
        inst.commits[(view, digest)][self.rid] = (-1, 0)
        self.trace(now, "commit", digest=digest)
        return out + self._on_commits(view, digest, now)

    def _on_commits(self, view: int, digest: bytes, now: int) -> list:
        inst = self.inst
        votes = inst.commits[(view, digest)]
        if len(votes) >= self.cfg.quorum and digest in inst.blocks:
            return self._finalize(view, digest, now)
        if len(votes) >= self.cfg.f + 1:
            return self._try_commit(view, digest, now)
        return []

    # -- finalization ----------------------------------------------------------------------------

    def _finalize(self, view: int, digest: bytes, now: int) -> list:
        inst = self.inst
        block = inst.blocks[digest]
        try:
            new_state = apply_block(self.state, block)
        except InvalidBlock:
            self.stats["finalize_failed"] += 1
            return []
        out: list = []
        if view not in inst.committed_views:
            # echo our own commit so peers still in this view can finish
            sent = self._send(Kind.COMMIT, self.height, view, digest, block, self.peers())
            if sent is not None:
                inst.committed_views.add(view)
                inst.commits[(view, digest)][self.rid] = (-1, 0)
                out += sent
        votes = inst.commits[(view, digest)]
        record = hashlib.sha256(b"".join(struct.pack(">IqQ", s, ki, tag) for s, (ki, tag) in sorted(votes.items())))
        cert = CommitCertificate(self.height, view, digest, tuple(sorted(votes)), record.digest())
        self.state = new_state
        self.chain.append(block, cert)
        self.certificates[block.header.height] = cert
        self.finalized_at[block.header.height] = now
        self.stats["finalized_blocks"] += 1
        self.stats["finalized_txs"] += len(block.transactions)
        self.trace(now, "finalize", digest=digest, txs=len(block.transactions), voters=len(votes))
        h = block.header.height
        self._erase_after(h)
        for tx in block.transactions:
            if tx.sender != self.rid:
                self.store.incoming[tx.sender].mark_evidence_used(tx.ctr)
        own = extract_evidence_payload(self.store, block, finalized=True)
        if own.entries:
            self.evidence[h][self.rid] = own
            out += [(j, EvidenceMessage(self.rid, own)) for j in self.peers()]
        for key in [k for k in self.mempool if k[1] < self.state.next_ctr[k[0]]]:
            del self.mempool[key]
        self.decided[h] = (digest, block, view)
        for old in [k for k in self.decided if k < h - 8]:
            del self.decided[old]
        for old in [k for k in self.evidence if k < h - 2]:
            del self.evidence[old]
        for old in [k for k in self._ev_checked if k < h - 2]:
            del self._ev_checked[old]
        self.view = max(self.view, view)
        self.vc_target = None
        self.failures = 0
        self.view_start = now
        self.last_finalize = now
        self.inst = Instance(h + 1)
        for v in self.buffer.pop(h + 1, []):
            out += self._dispatch(v, now)
        if self.inst.height == h + 1:
            out += self._maybe_propose(now)
        return out

    def _erase_after(self, height: int) -> None:
        # sender side: everything reserved so far; receiver side: every bundle seen up to this height
        for pool in self.store.outgoing.values():
            if pool.consensus.head:
                pool.erase_consensus_keys(pool.consensus.head - 1)
        for key in [k for k in self.bundles if k[0] <= height]:
            for kps in self.bundles.pop(key).values():
                for kp in kps:
                    if not kp.k_otp.consumed:
                        kp.k_otp.consume()
        for h in [k for k in self.recv_bundles if k <= height]:
            for sender, base in self.recv_bundles.pop(h):
                self._erase_bundle(sender, base)
        self.stats["erasures"] += 1

    def _decided_reply(self, msg: ConsensusMessage, now: int) -> list:
        # a peer still working on a height we decided: vote for the decided block in its view
        if msg.kind != Kind.VIEW_CHANGE or msg.height not in self.decided:
            return []
        key = (msg.sender, msg.height, msg.view)
        if key in self.replied:
            return []
        digest, block, _ = self.decided[msg.height]
        out = self._send(Kind.COMMIT, msg.height, msg.view, digest, block, [msg.sender], single=True)
        if out is None:
            return []
        self.replied.add(key)
        self.stats["decided_replies"] += 1
        return out

    # -- view change -----------------------------------------------------------------------------

    def _start_view_change(self, target: int, now: int) -> list:
        inst = self.inst
        lock_view, digest, block = -1, ZERO_HASH, None
        if inst.lock is not None:
            lock_view, digest = inst.lock
            block = inst.blocks.get(digest)
        out = self._send(Kind.VIEW_CHANGE, self.height, target, digest, block, self.peers(), lock_view)
        if out is None:
            return []
        self.vc_target = target
        self.vc_time = now
        inst.vc[target][self.rid] = (lock_view, digest)
        inst.peer_vc[self.rid] = target
        self.stats["view_change_sent"] += 1
        self.trace(now, "view_change", target=target)
        return out + self._on_view_change(now)

    def _on_view_change(self, now: int) -> list:
        inst, f, q = self.inst, self.cfg.f, self.cfg.quorum
        out: list = []
        cur = self.vc_target if self.vc_target is not None else self.view
        targets = sorted({t for t in inst.peer_vc.values() if t > cur}, reverse=True)
        for t in targets:
            if sum(1 for x in inst.peer_vc.values() if x >= t) >= f + 1:
                out += self._start_view_change(t, now)
                break
        if self.inst is not inst:
            return out
        for t in sorted(inst.vc, reverse=True):
            if t > self.view and len(inst.vc[t]) >= q:
                return out + self._enter_view(t, now)
        return out

    def _maybe_skip(self, now: int) -> list:
        inst = self.inst
        higher = sorted({v for v in inst.peer_view.values() if v > self.view}, reverse=True)
        for t in higher:
            if sum(1 for v in inst.peer_view.values() if v >= t) >= self.cfg.f + 1:
                return self._enter_view(t, now)
        return []

    def _enter_view(self, t: int, now: int) -> list:
        inst = self.inst
        self.view = t
        self.view_start = now
        if self.vc_target is not None and self.vc_target <= t:
            self.vc_target = None
        inst.proposal_time = None
        self.stats["views_entered"] += 1
        self.trace(now, "enter_view", leader=self.cfg.leader(t))
        out = self._maybe_propose(now)
        if self.inst is not inst:
            return out
        d = inst.proposals.get(t)
        if d is not None:
            inst.proposal_time = now
            out += self._try_prepare(t, d, now)
        for (v, dd) in list(inst.prepares):
            if v == t and self.inst is inst:
                out += self._on_prepares(v, dd, now)
        for (v, dd) in list(inst.commits):
            if v == t and self.inst is inst:
                out += self._on_commits(v, dd, now)
        return out

    # -- timers ----------------------------------------------------------------------------------

    def _vc_deadline(self) -> int | None:
        to = self.cfg.timeout(self.failures)
        if self.vc_target is not None:
            return self.vc_time + to
        inst = self.inst
        cands = []
        if inst.proposal_time is not None:
            cands.append(inst.proposal_time + to)
        oldest = self.oldest_pending()
        if oldest is not None:
            if inst.proposal_time is None:
                cands.append(max(oldest, self.view_start) + self.cfg.batch_wait + to)
            # a transaction left out for a whole tx_timeout of this view points at the leader
            cands.append(max(oldest, self.view_start) + self.cfg.tx_timeout)
        return min(cands) if cands else None

    def next_deadline(self) -> int | None:
        if self._starved:
            return None
        cands = [t for t in (self._vc_deadline(), self._propose_time()) if t is not None]
        return min(cands) if cands else None

    def on_timer(self, now: int) -> list:
        out = self._maybe_propose(now)
        d = self._vc_deadline()
        if d is not None and now >= d and self.inst.height == self.height:
            target = (self.vc_target if self.vc_target is not None else self.view) + 1
            self.failures += 1
            out += self._start_view_change(target, now)
        return out

    def poke(self, now: int) -> list:
        """Retry work that was waiting for key material."""
        self._starved = False
        out = self._maybe_propose(now)
        inst = self.inst
        d = inst.proposals.get(self.view)
        if d is not None:
            out += self._try_prepare(self.view, d, now)
            if self.inst is inst:
                out += self._on_prepares(self.view, d, now)
        return out


@dataclass(frozen=True)
class SafetyVerdict:
    ok: bool
    violations: tuple[tuple[int, int, int], ...]
    max_common_height: int

    def to_dict(self) -> dict:
        return {"ok": self.ok, "violations": [list(v) for v in self.violations],
                "max_common_height": self.max_common_height}


def finality_check(replicas) -> SafetyVerdict:
    """No two honest replicas finalized different blocks at any height."""
    honest = [r for r in replicas if r.honest]
    violations = []
    top = max((r.chain.height for r in honest), default=0)
    for h in range(1, top + 1):
        seen: dict[bytes, int] = {}
        for r in honest:
            if r.chain.height >= h:
                d = r.chain.blocks[h].digest
                if seen and d not in seen:
                    violations.append((h, next(iter(seen.values())), r.rid))
                seen.setdefault(d, r.rid)
    common = min((r.chain.height for r in honest), default=0)
    return SafetyVerdict(not violations, tuple(violations), common)
