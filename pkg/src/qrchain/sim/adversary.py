"""Byzantine replica roles and external attackers.

Replica roles subclass :class:`Replica` and see exactly what that replica sees.
The framing receiver and the long-range forger are driven by the harness but
only ever read material their role legitimately holds: the framing receiver
its own pairwise keys, the forger the public chain (including every disclosed
evidence key).
"""
from __future__ import annotations

import random
from dataclasses import dataclass, replace

from ..auth.wc import AuthVector, axu_hash, tag_from_values, tagged_message
from ..consensus import ConsensusMessage, Kind, Replica, TxMessage
from ..ledger import Block, Chain, Transaction, make_block


class SilentReplica(Replica):
    """Crashed from the start: sends nothing, issues no transactions."""

    honest = False
    issues_transactions = False

    def on_message(self, msg, source, now):
        return []

    def on_timer(self, now):
        return []

    def poke(self, now):
        return []

    def next_deadline(self):
        return None


class CensoringLeader(Replica):
    """Votes honestly but never includes transactions from ``targets`` in its proposals."""

    honest = False
    issues_transactions = False

    def __init__(self, *args, targets=(), **kw):
        super().__init__(*args, **kw)
        self.targets = frozenset(targets)

    def _eligible(self, tx: Transaction) -> bool:
        return tx.sender not in self.targets


class EquivocatingLeader(Replica):
    """As leader, sends two different blocks to two halves of the replicas and votes for both."""

    honest = False
    issues_transactions = False

    def __init__(self, *args, rng: random.Random | None = None, **kw):
        super().__init__(*args, **kw)
        self.rng = rng or random.Random(0)
        self.equivocated = 0

    def _broadcast_proposal(self, block: Block, now: int) -> list:
        inst, v, h = self.inst, self.view, self.height
        if not block.transactions or block.header.view != v:
            return super()._broadcast_proposal(block, now)
        txs = list(block.transactions)
        alt = make_block(h, block.header.prev_hash, self.rid, v, txs[:-1], block.evidence_for_previous)
        peers = self.peers()
        self.rng.shuffle(peers)
        cut = self.rng.randint(1, len(peers) - 1) if len(peers) > 1 else 1
        groups = ((block, sorted(peers[:cut])), (alt, sorted(peers[cut:])))
        out = []
        for blk, group in groups:
            if not group:
                continue
            for kind in (Kind.PROPOSAL, Kind.PREPARE, Kind.COMMIT):
                sent = self._send(kind, h, v, blk.digest, blk, group)
                if sent is None:
                    return out
                out += sent
        inst.proposed_views.add(v)
        inst.prepared_views.add(v)
        inst.committed_views.add(v)
        inst.blocks[block.digest] = block
        inst.blocks[alt.digest] = alt
        inst.valid[block.digest] = inst.valid[alt.digest] = True
        inst.proposals[v] = block.digest
        inst.proposal_time = now
        inst.prepares[(v, block.digest)].add(self.rid)
        inst.commits[(v, block.digest)][self.rid] = (-1, 0)
        self.equivocated += 1
        self.trace(now, "equivocate", digest=block.digest, alt=alt.digest)
        return out


class FramingReceiver(Replica):
    """Honest in consensus, but rewrites transactions it receives and pushes the forgeries to peers.

    For its own slot it recomputes the tag correctly; for every other peer it
    shifts the honest tag by the hash difference under its *own* key, the best
    it can do without the other pairwise keys.
    """

    honest = True  # it never deviates in consensus, so safety still covers it
    issues_transactions = True

    def __init__(self, *args, rng: random.Random | None = None, budget: int = 100, victims=None, **kw):
        super().__init__(*args, **kw)
        self.rng = rng or random.Random(0)
        self.budget = budget
        self.victims = None if victims is None else frozenset(victims)
        self.forged: list[Transaction] = []

    def on_message(self, msg, source, now):
        out = super().on_message(msg, source, now)
        if isinstance(msg, TxMessage) and len(self.forged) < self.budget:
            tx = msg.tx
            if tx.sender != self.rid and (self.victims is None or tx.sender in self.victims):
                forged = self._forge(tx)
                if forged is not None:
                    self.forged.append(forged)
                    out = out + [(j, TxMessage(forged)) for j in self.peers() if j != tx.sender]
        return out

    def _forge(self, tx: Transaction) -> Transaction | None:
        pool = self.store.incoming[tx.sender]
        try:
            kp = pool.evidence_pair(tx.ctr)
        except Exception:
            return None
        new_pay = replace(tx.payment, receiver=self.rid, amount=tx.payment.amount + self.rng.randint(1, 1000))
        if new_pay.receiver == tx.sender:
            return None
        m1, m2 = tagged_message(tx.message, tx.ctr), tagged_message(new_pay.to_bytes(), tx.ctr)
        shift = axu_hash(kp.k_hash, m1) ^ axu_hash(kp.k_hash, m2)
        tags = list(tx.vector.tags)
        for j in range(self.n):
            if j == tx.sender:
                continue
            if j == self.rid:
                tags[j] = tag_from_values(kp.k_hash.value, kp.k_otp.value, new_pay.to_bytes(), tx.ctr,
                                          self.store.bits)
            else:
                tags[j] ^= shift
        return Transaction(tx.sender, tx.ctr, new_pay, AuthVector(tx.sender, tuple(tags), tx.vector.bits))


@dataclass
class ForgeryTally:
    attempts: int = 0
    messages: int = 0
    verified: int = 0
    adopted: int = 0

    def to_dict(self) -> dict:
        return {"attempts": self.attempts, "messages": self.messages, "verified": self.verified,
                "adopted": self.adopted}


class LongRangeForger:
    """Rewrites finished history using only public data and tries to get replicas to accept it.

    Each attempt alters one finalized transaction (re-tagging it with the
    disclosed evidence keys, so the evidence layer looks consistent), reseals a
    short forked segment, and sends forged commit votes that claim to come from
    a quorum of replicas.  Vote tags are built three ways: random guesses,
    tags computed from disclosed evidence keys, and replays of key indices that
    were already used.
    """

    def __init__(self, rng: random.Random, attempts: int = 1000, segment: int = 2) -> None:
        self.rng = rng
        self.attempts = attempts
        self.segment = segment
        self.tally = ForgeryTally()
        self.forged_digests: set[bytes] = set()

    def _fork(self, chain: Chain, h: int) -> list[Block]:
        rng = self.rng
        base = chain.blocks[h]
        txs = list(base.transactions)
        if txs:
            i = rng.randrange(len(txs))
            tx = txs[i]
            try:
                payload = chain.evidence_for(h)
                keys = dict(((e.sender, e.ctr), e) for e in payload.entries).get(tx.tx_id)
            except Exception:
                keys = None
            pay = replace(tx.payment, amount=tx.payment.amount + rng.randint(1, 10**6))
            if keys is not None:
                tags = [0] * chain.n
                for peer, kh, ko in keys.keys:
                    tags[peer] = tag_from_values(kh, ko, pay.to_bytes(), tx.ctr, chain.bits)
                vec = AuthVector(tx.sender, tuple(tags), tx.vector.bits)
            else:
                vec = tx.vector
            txs[i] = Transaction(tx.sender, tx.ctr, pay, vec)
        else:
            txs = []
        blocks = [make_block(h, base.header.prev_hash, base.header.proposer, base.header.view + 1, txs,
                             base.evidence_for_previous)]
        for k in range(1, self.segment):
            if h + k > chain.height:
                break
            nxt = chain.blocks[h + k]
            blocks.append(make_block(h + k, blocks[-1].digest, nxt.header.proposer, nxt.header.view,
                                     nxt.transactions, nxt.evidence_for_previous))
        return blocks

    def attack(self, chain: Chain, targets: list[Replica], quorum: int, now: int) -> None:
        """Run every attempt against ``targets`` using ``chain`` as the public record."""
        if chain.height < 1:
            return
        n = chain.n
        for a in range(self.attempts):
            h = self.rng.randint(1, chain.height)
            fork = self._fork(chain, h)
            self.forged_digests.update(b.digest for b in fork)
            self.tally.attempts += 1
            for target in targets:
                voters = [j for j in range(n) if j != target.rid]
                self.rng.shuffle(voters)
                for blk in fork:
                    for voter in voters[:quorum]:
                        msg = self._forged_vote(chain, blk, voter, target, a)
                        before = target.stats["verified"]
                        target.on_message(msg, voter, now)
                        self.tally.messages += 1
                        if target.stats["verified"] != before:
                            self.tally.verified += 1

    def _forged_vote(self, chain: Chain, blk: Block, voter: int, target: Replica, attempt: int) -> ConsensusMessage:
        rng, bits = self.rng, chain.bits
        pool_head = target.store.incoming[voter].consensus.head
        strategy = attempt % 3
        if strategy == 0:
            index = rng.randrange(max(1, pool_head + 8))
            tag = rng.getrandbits(bits)
        elif strategy == 1:
            # wrong stratum: a disclosed evidence key pair of this very sender/receiver pair
            index = rng.randrange(max(1, pool_head + 8))
            proto = ConsensusMessage(Kind.COMMIT, blk.header.view, blk.header.height, blk.digest, voter,
                                     target.rid, index, 0, blk)
            kh, ko = self._disclosed_key(chain, voter, target.rid)
            tag = tag_from_values(kh, ko, proto.auth_bytes(), index, bits)
        else:
            index = rng.randrange(max(1, pool_head)) if pool_head else 0
            tag = rng.getrandbits(bits)
        return ConsensusMessage(Kind.COMMIT, blk.header.view, blk.header.height, blk.digest, voter, target.rid,
                                index, tag, blk)

    def _disclosed_key(self, chain: Chain, sender: int, receiver: int) -> tuple[int, int]:
        for h in range(chain.height, 0, -1):
            try:
                payload = chain.evidence_for(h)
            except Exception:
                continue
            for e in payload.entries:
                if e.sender == sender:
                    return e.key_for(receiver)
        return self.rng.getrandbits(chain.bits), self.rng.getrandbits(chain.bits)

    def adopted(self, replicas) -> int:
        count = 0
        for r in replicas:
            if any(b.digest in self.forged_digests for b in r.chain.blocks):
                count += 1
        self.tally.adopted = count
        return count


__all__ = [
    "CensoringLeader",
    "EquivocatingLeader",
    "FramingReceiver",
    "LongRangeForger",
    "SilentReplica",
]
