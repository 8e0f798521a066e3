"""Transactions, blocks, account state, hash chaining and the public audit.

Canonical encodings are big-endian with every variable-length field prefixed
by its u32 length.  Digests are SHA-256 over a domain tag and the encoding.

Header encoding (fields in order):
    u64 height | lp(prev_hash) | lp(body_digest) | u32 proposer | u64 view
Body digest input:
    u32 tx count | lp(tx) ... | lp(evidence payload, empty for genesis)
Transaction encoding:
    u32 sender | u64 ctr | lp(payment) | u16 tag bits | lp(auth vector)
Payment encoding (the authenticated message M):
    u32 sender | u32 receiver | u64 amount | u64 timestamp_us
Evidence payload encoding:
    u64 block height | u16 tag bits | u32 entries,
    per entry u32 sender | u64 ctr | u32 keys, per key u32 peer | k_hash | k_otp
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Mapping

from .auth.wc import AuthVector, tag_from_values, verify_tag
from .errors import KeyErased, Unauditable
from .keystore import EvidenceEntry, EvidencePayload

if TYPE_CHECKING:
    from .keystore import NodeKeyStore

ZERO_HASH = bytes(32)


def _lp(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError("truncated encoding")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u(self, fmt: str) -> int:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def lp(self) -> bytes:
        return self.take(self.u(">I"))

    def done(self) -> None:
        if self.pos != len(self.data):
            raise ValueError("trailing bytes in encoding")


def _sha(domain: bytes, data: bytes) -> bytes:
    return hashlib.sha256(domain + data).digest()


# -- transactions -----------------------------------------------------------------------


@dataclass(frozen=True)
class Payment:
    sender: int
    receiver: int
    amount: int
    timestamp: int = 0

    def to_bytes(self) -> bytes:
        return struct.pack(">IIQQ", self.sender, self.receiver, self.amount, self.timestamp)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Payment":
        return cls(*struct.unpack(">IIQQ", data))


@dataclass(frozen=True)
class Transaction:
    sender: int
    ctr: int
    payment: Payment
    vector: AuthVector

    @property
    def message(self) -> bytes:
        return self.payment.to_bytes()

    @property
    def tx_id(self) -> tuple[int, int]:
        return self.sender, self.ctr

    @cached_property
    def _encoded(self) -> bytes:
        return (struct.pack(">IQ", self.sender, self.ctr) + _lp(self.message)
                + struct.pack(">H", self.vector.bits) + _lp(self.vector.to_bytes()))

    def to_bytes(self) -> bytes:
        return self._encoded

    @classmethod
    def from_reader(cls, r: _Reader) -> "Transaction":
        sender, ctr = r.u(">I"), r.u(">Q")
        payment = Payment.from_bytes(r.lp())
        bits = r.u(">H")
        raw = r.lp()
        n = (len(raw) - 4) // (bits // 8)
        return cls(sender, ctr, payment, AuthVector.from_bytes(raw, n, bits))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Transaction":
        r = _Reader(data)
        tx = cls.from_reader(r)
        r.done()
        return tx


# -- evidence payload codec -----------------------------------------------------------------


def encode_evidence(p: EvidencePayload | None) -> bytes:
    if p is None:
        return b""
    width = p.bits // 8
    out = [struct.pack(">QHI", p.block_height, p.bits, len(p.entries))]
    for e in p.entries:
        out.append(struct.pack(">IQI", e.sender, e.ctr, len(e.keys)))
        for peer, kh, ko in e.keys:
            out.append(struct.pack(">I", peer) + kh.to_bytes(width, "big") + ko.to_bytes(width, "big"))
    return b"".join(out)


def decode_evidence(data: bytes) -> EvidencePayload | None:
    if not data:
        return None
    r = _Reader(data)
    height, bits, count = r.u(">Q"), r.u(">H"), r.u(">I")
    width = bits // 8
    entries = []
    for _ in range(count):
        sender, ctr, k = r.u(">I"), r.u(">Q"), r.u(">I")
        keys = []
        for _ in range(k):
            peer = r.u(">I")
            kh = int.from_bytes(r.take(width), "big")
            ko = int.from_bytes(r.take(width), "big")
            keys.append((peer, kh, ko))
        entries.append(EvidenceEntry(sender, ctr, tuple(keys)))
    r.done()
    return EvidencePayload(height, tuple(entries), bits)


# -- blocks ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockHeader:
    height: int
    prev_hash: bytes
    body_digest: bytes
    proposer: int
    view: int

    def to_bytes(self) -> bytes:
        return (struct.pack(">Q", self.height) + _lp(self.prev_hash) + _lp(self.body_digest)
                + struct.pack(">IQ", self.proposer, self.view))

    @classmethod
    def from_bytes(cls, data: bytes) -> "BlockHeader":
        r = _Reader(data)
        h = r.u(">Q")
        prev, body = r.lp(), r.lp()
        proposer, view = r.u(">I"), r.u(">Q")
        r.done()
        return cls(h, prev, body, proposer, view)


def header_hash(header: BlockHeader) -> bytes:
    return _sha(b"qrchain/header", header.to_bytes())


def body_digest(transactions: Iterable[Transaction], evidence: EvidencePayload | None) -> bytes:
    txs = list(transactions)
    data = struct.pack(">I", len(txs)) + b"".join(_lp(t.to_bytes()) for t in txs) + _lp(encode_evidence(evidence))
    return _sha(b"qrchain/body", data)


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    transactions: tuple[Transaction, ...] = ()
    evidence_for_previous: EvidencePayload | None = None

    def __post_init__(self) -> None:
        h = self.header.height
        ev = self.evidence_for_previous
        if h == 0:
            if ev is not None:
                raise ValueError("genesis carries no evidence")
        elif ev is None or ev.block_height != h - 1:
            raise ValueError(f"block {h} must carry evidence for block {h - 1}")

    # blocks are immutable, so both hashes are computed once per object
    @cached_property
    def digest(self) -> bytes:
        return header_hash(self.header)

    @cached_property
    def _body_matches(self) -> bool:
        return body_digest(self.transactions, self.evidence_for_previous) == self.header.body_digest

    def body_ok(self) -> bool:
        return self._body_matches

    def to_bytes(self) -> bytes:
        return (_lp(self.header.to_bytes()) + struct.pack(">I", len(self.transactions))
                + b"".join(_lp(t.to_bytes()) for t in self.transactions)
                + _lp(encode_evidence(self.evidence_for_previous)))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Block":
        r = _Reader(data)
        header = BlockHeader.from_bytes(r.lp())
        txs = tuple(Transaction.from_bytes(r.lp()) for _ in range(r.u(">I")))
        ev = decode_evidence(r.lp())
        r.done()
        return cls(header, txs, ev)


def make_block(height: int, prev_hash: bytes, proposer: int, view: int,
               transactions: Iterable[Transaction], evidence: EvidencePayload | None) -> Block:
    txs = tuple(transactions)
    header = BlockHeader(height, prev_hash, body_digest(txs, evidence), proposer, view)
    return Block(header, txs, evidence)


def genesis_block() -> Block:
    return make_block(0, ZERO_HASH, 0, 0, (), None)


@dataclass(frozen=True)
class CommitCertificate:
    height: int
    view: int
    block_digest: bytes
    voters: tuple[int, ...]
    record_digest: bytes

    def to_bytes(self) -> bytes:
        return (struct.pack(">QQ", self.height, self.view) + _lp(self.block_digest)
                + struct.pack(">I", len(self.voters)) + b"".join(struct.pack(">I", v) for v in self.voters)
                + _lp(self.record_digest))

    @classmethod
    def from_bytes(cls, data: bytes) -> "CommitCertificate":
        r = _Reader(data)
        height, view = r.u(">Q"), r.u(">Q")
        digest = r.lp()
        voters = tuple(r.u(">I") for _ in range(r.u(">I")))
        rec = r.lp()
        r.done()
        return cls(height, view, digest, voters, rec)


# -- account state and validation ------------------------------------------------------------


class RejectReason(Enum):
    BAD_TAG = "BadTag"
    MISSING_TAG = "MissingTag"
    REPLAY = "Replay"
    INSUFFICIENT_BALANCE = "InsufficientBalance"
    COUNTER_GAP = "CounterGap"
    KEY_UNAVAILABLE = "KeyUnavailable"
    MALFORMED = "Malformed"


@dataclass(frozen=True)
class Verdict:
    reason: RejectReason | None = None

    @property
    def accepted(self) -> bool:
        return self.reason is None

    def __bool__(self) -> bool:
        return self.accepted


ACCEPT = Verdict()


class InvalidBlock(ValueError):
    pass


@dataclass
class AccountState:
    n: int
    balances: dict[int, int]
    next_ctr: dict[int, int] = field(default_factory=dict)
    height: int = 0
    tip_hash: bytes = ZERO_HASH

    @classmethod
    def genesis(cls, n: int, balances: Mapping[int, int] | int) -> "AccountState":
        if isinstance(balances, int):
            balances = {i: balances for i in range(n)}
        if sorted(balances) != list(range(n)) or any(v < 0 for v in balances.values()):
            raise ValueError("genesis needs a non-negative balance for every node")
        state = cls(n, dict(balances), {i: 0 for i in range(n)})
        state.tip_hash = genesis_block().digest
        return state

    def copy(self) -> "AccountState":
        return AccountState(self.n, dict(self.balances), dict(self.next_ctr), self.height, self.tip_hash)

    @property
    def total(self) -> int:
        return sum(self.balances.values())

    def digest(self) -> bytes:
        parts = [struct.pack(">IQ", self.n, self.height), _lp(self.tip_hash)]
        for i in range(self.n):
            parts.append(struct.pack(">QQ", self.balances[i], self.next_ctr[i]))
        return _sha(b"qrchain/state", b"".join(parts))

    def semantic_check(self, tx: Transaction) -> Verdict:
        p = tx.payment
        if p.sender != tx.sender or not 0 <= p.receiver < self.n or p.receiver == p.sender or p.amount <= 0:
            return Verdict(RejectReason.MALFORMED)
        expected = self.next_ctr.get(tx.sender, 0)
        if tx.ctr < expected:
            return Verdict(RejectReason.REPLAY)
        if tx.ctr > expected:
            return Verdict(RejectReason.COUNTER_GAP)
        if self.balances[tx.sender] < p.amount:
            return Verdict(RejectReason.INSUFFICIENT_BALANCE)
        return ACCEPT

    def apply_tx(self, tx: Transaction) -> None:
        p = tx.payment
        self.balances[p.sender] -= p.amount
        self.balances[p.receiver] += p.amount
        self.next_ctr[tx.sender] = tx.ctr + 1


def check_tag(tx: Transaction, verifier_id: int, n: int, keystore: "NodeKeyStore") -> Verdict:
    """Step one of the dual check: the verifier's own slot under its pairwise key."""
    v = tx.vector
    if v.n != n or v.sender != tx.sender or not 0 <= tx.sender < n:
        return Verdict(RejectReason.MISSING_TAG)
    if verifier_id == tx.sender:
        return ACCEPT
    if v.bits != keystore.bits:
        return Verdict(RejectReason.MISSING_TAG)
    try:
        kp = keystore.incoming[tx.sender].evidence_pair(tx.ctr)
    except KeyErased:
        return Verdict(RejectReason.KEY_UNAVAILABLE)
    if not verify_tag(kp.k_hash, kp.k_otp, tx.message, tx.ctr, v.tag_for(verifier_id)):
        return Verdict(RejectReason.BAD_TAG)
    return ACCEPT


def validate_transaction(state: AccountState, tx: Transaction, verifier_id: int,
                         keystore: "NodeKeyStore") -> Verdict:
    verdict = check_tag(tx, verifier_id, state.n, keystore)
    if not verdict:
        return verdict
    return state.semantic_check(tx)


def validate_transactions(state: AccountState, txs: Iterable[Transaction], verifier_id: int,
                          keystore: "NodeKeyStore") -> list[Verdict]:
    """Validate a sequence in order, each against the state left by the accepted ones before it."""
    scratch = state.copy()
    out = []
    for tx in txs:
        verdict = validate_transaction(scratch, tx, verifier_id, keystore)
        if verdict:
            scratch.apply_tx(tx)
        out.append(verdict)
    return out


def apply_block(state: AccountState, block: Block) -> AccountState:
    h = block.header
    if h.height != state.height + 1:
        raise InvalidBlock(f"expected height {state.height + 1}, got {h.height}")
    if h.prev_hash != state.tip_hash:
        raise InvalidBlock("prev_hash does not match the current tip")
    if not block.body_ok():
        raise InvalidBlock("body digest mismatch")
    new = state.copy()
    for tx in block.transactions:
        verdict = new.semantic_check(tx)
        if not verdict:
            raise InvalidBlock(f"tx {tx.tx_id}: {verdict.reason.value}")
        new.apply_tx(tx)
    new.height = h.height
    new.tip_hash = block.digest
    return new


# -- chain -----------------------------------------------------------------------------------


@dataclass
class Chain:
    n: int
    bits: int
    initial_balances: dict[int, int]
    blocks: list[Block] = field(default_factory=list)
    epilogue: EvidencePayload | None = None
    certificates: dict[int, CommitCertificate] = field(default_factory=dict)

    @classmethod
    def new(cls, n: int, balances: Mapping[int, int] | int, bits: int = 64) -> "Chain":
        state = AccountState.genesis(n, balances)
        return cls(n, bits, dict(state.balances), [genesis_block()])

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    @property
    def height(self) -> int:
        return self.tip.header.height

    def append(self, block: Block, certificate: CommitCertificate | None = None) -> None:
        h = block.header
        if h.height != self.height + 1 or h.prev_hash != self.tip.digest:
            raise InvalidBlock("block does not extend the tip")
        self.blocks.append(block)
        if certificate is not None:
            self.certificates[h.height] = certificate

    def digests(self) -> list[bytes]:
        return [b.digest for b in self.blocks]

    def integrity_errors(self) -> list[str]:
        errs = []
        if not self.blocks or self.blocks[0] != genesis_block():
            errs.append("genesis block differs from the canonical genesis")
        for i, b in enumerate(self.blocks):
            if b.header.height != i:
                errs.append(f"block {i}: stored height {b.header.height}")
            if not b.body_ok():
                errs.append(f"block {i}: body digest mismatch")
            if i and b.header.prev_hash != self.blocks[i - 1].digest:
                errs.append(f"block {i}: prev_hash does not match block {i - 1}")
        return errs

    def replay_state(self) -> AccountState:
        state = AccountState.genesis(self.n, self.initial_balances)
        for b in self.blocks[1:]:
            state = apply_block(state, b)
        return state

    def evidence_for(self, height: int) -> EvidencePayload:
        if height < self.height:
            ev = self.blocks[height + 1].evidence_for_previous
        elif height == self.height:
            ev = self.epilogue
        else:
            raise Unauditable(f"no block at height {height}")
        if ev is None or ev.block_height != height:
            raise Unauditable(f"no evidence payload for block {height}")
        return ev

    def to_json(self) -> dict:
        return chain_to_json(self)


# -- public audit ------------------------------------------------------------------------------


@dataclass(frozen=True)
class TxAudit:
    sender: int
    ctr: int
    ok: bool
    failed_slots: tuple[int, ...] = ()
    note: str = ""


@dataclass(frozen=True)
class AuditReport:
    height: int
    transactions: tuple[TxAudit, ...]
    stray_entries: tuple[tuple[int, int], ...] = ()

    @property
    def ok(self) -> bool:
        return not self.stray_entries and all(t.ok for t in self.transactions)

    def failures(self) -> list[TxAudit]:
        return [t for t in self.transactions if not t.ok]


NO_KEYS = "no disclosed keys"


def audit_transaction(tx: Transaction, entry: EvidenceEntry | None, n: int, bits: int) -> TxAudit:
    if entry is None:
        return TxAudit(tx.sender, tx.ctr, False, note=NO_KEYS)
    v = tx.vector
    if v.n != n or v.bits != bits or v.sender != tx.sender or not v.well_formed():
        return TxAudit(tx.sender, tx.ctr, False, note="malformed vector")
    keys = {p: (kh, ko) for p, kh, ko in entry.keys}
    bad = []
    for j in range(n):
        if j == tx.sender:
            continue
        if j not in keys:
            bad.append(j)
            continue
        kh, ko = keys[j]
        if tag_from_values(kh, ko, tx.message, tx.ctr, bits) != v.tags[j]:
            bad.append(j)
    extra = set(keys) - (set(range(n)) - {tx.sender})
    return TxAudit(tx.sender, tx.ctr, not bad and not extra, tuple(bad), "extra keys" if extra else "")


def audit_block(chain: Chain, height: int) -> AuditReport:
    """Re-verify every full MAC vector of block ``height`` from disclosed keys alone."""
    payload = chain.evidence_for(height)
    block = chain.blocks[height]
    lookup = payload.lookup()
    results = tuple(audit_transaction(tx, lookup.pop(tx.tx_id, None), chain.n, payload.bits)
                    for tx in block.transactions)
    return AuditReport(height, results, tuple(sorted(lookup)))


@dataclass(frozen=True)
class ChainAudit:
    integrity_errors: tuple[str, ...]
    blocks: tuple[AuditReport, ...]
    unauditable: tuple[int, ...] = ()
    state_error: str = ""

    @property
    def ok(self) -> bool:
        return (not self.integrity_errors and not self.unauditable and not self.state_error
                and all(b.ok for b in self.blocks))

    def failed_transactions(self) -> list[tuple[int, TxAudit]]:
        return [(b.height, t) for b in self.blocks for t in b.failures()]

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "integrity_errors": list(self.integrity_errors),
            "unauditable_heights": list(self.unauditable),
            "state_error": self.state_error,
            "blocks_audited": len(self.blocks),
            "transactions_audited": sum(len(b.transactions) for b in self.blocks),
            "failed_transactions": [
                {"height": h, "sender": t.sender, "ctr": t.ctr, "failed_slots": list(t.failed_slots), "note": t.note}
                for h, t in self.failed_transactions()
            ],
            "stray_evidence": [
                {"height": b.height, "sender": s, "ctr": c} for b in self.blocks for s, c in b.stray_entries
            ],
        }


def audit_chain(chain: Chain, *, strict: bool = False) -> ChainAudit:
    """Integrity of the hash chain, then the evidence audit of every block.

    With ``strict`` a block without evidence raises ``Unauditable``; otherwise
    it is listed in the report and the verdict fails.
    """
    errs = tuple(chain.integrity_errors())
    reports, missing = [], []
    for h in range(1, chain.height + 1):
        try:
            reports.append(audit_block(chain, h))
        except Unauditable:
            if strict:
                raise
            missing.append(h)
    state_error = ""
    try:
        chain.replay_state()
    except InvalidBlock as exc:
        state_error = str(exc)
    return ChainAudit(errs, tuple(reports), tuple(missing), state_error)


# -- chain file ----------------------------------------------------------------------------------

MAGIC = b"QRCH"
FILE_VERSION = 1
REC_META, REC_BLOCK, REC_EPILOGUE, REC_CERT = 1, 2, 3, 4


def _record(kind: int, payload: bytes) -> bytes:
    return struct.pack(">IB", len(payload), kind) + payload


def chain_to_bytes(chain: Chain) -> bytes:
    meta = struct.pack(">IH", chain.n, chain.bits) + b"".join(
        struct.pack(">Q", chain.initial_balances[i]) for i in range(chain.n))
    out = [MAGIC, struct.pack(">H", FILE_VERSION), _record(REC_META, meta)]
    out += [_record(REC_BLOCK, b.to_bytes()) for b in chain.blocks]
    for h in sorted(chain.certificates):
        out.append(_record(REC_CERT, chain.certificates[h].to_bytes()))
    if chain.epilogue is not None:
        out.append(_record(REC_EPILOGUE, encode_evidence(chain.epilogue)))
    return b"".join(out)


def chain_from_bytes(data: bytes) -> Chain:
    if data[:4] != MAGIC:
        raise ValueError("not a chain file")
    r = _Reader(data)
    r.take(4)
    if r.u(">H") != FILE_VERSION:
        raise ValueError("unsupported chain file version")
    chain: Chain | None = None
    while r.pos < len(data):
        length, kind = r.u(">I"), r.u(">B")
        payload = r.take(length)
        if kind == REC_META:
            m = _Reader(payload)
            n, bits = m.u(">I"), m.u(">H")
            balances = {i: m.u(">Q") for i in range(n)}
            m.done()
            chain = Chain(n, bits, balances)
        elif chain is None:
            raise ValueError("chain file must start with a meta record")
        elif kind == REC_BLOCK:
            chain.blocks.append(Block.from_bytes(payload))
        elif kind == REC_CERT:
            cert = CommitCertificate.from_bytes(payload)
            chain.certificates[cert.height] = cert
        elif kind == REC_EPILOGUE:
            chain.epilogue = decode_evidence(payload)
        else:
            raise ValueError(f"unknown record type {kind}")
    if chain is None:
        raise ValueError("empty chain file")
    return chain


def write_chain(chain: Chain, path) -> None:
    with open(path, "wb") as fh:
        fh.write(chain_to_bytes(chain))


def read_chain(path) -> Chain:
    with open(path, "rb") as fh:
        return chain_from_bytes(fh.read())


def _evidence_json(p: EvidencePayload | None):
    if p is None:
        return None
    return {
        "block_height": p.block_height,
        "bits": p.bits,
        "entries": [
            {"sender": e.sender, "ctr": e.ctr,
             "keys": [{"peer": peer, "k_hash": f"{kh:x}", "k_otp": f"{ko:x}"} for peer, kh, ko in e.keys]}
            for e in p.entries
        ],
    }


def chain_to_json(chain: Chain) -> dict:
    blocks = []
    for b in chain.blocks:
        h = b.header
        blocks.append({
            "height": h.height,
            "hash": b.digest.hex(),
            "prev_hash": h.prev_hash.hex(),
            "body_digest": h.body_digest.hex(),
            "proposer": h.proposer,
            "view": h.view,
            "transactions": [
                {"sender": t.sender, "ctr": t.ctr, "receiver": t.payment.receiver,
                 "amount": t.payment.amount, "timestamp_us": t.payment.timestamp,
                 "tags": [f"{x:x}" for x in t.vector.tags]}
                for t in b.transactions
            ],
            "evidence_for_previous": _evidence_json(b.evidence_for_previous),
        })
    return {
        "n": chain.n,
        "bits": chain.bits,
        "initial_balances": [chain.initial_balances[i] for i in range(chain.n)],
        "blocks": blocks,
        "certificates": [
            {"height": c.height, "view": c.view, "block_digest": c.block_digest.hex(),
             "voters": list(c.voters), "record_digest": c.record_digest.hex()}
            for _, c in sorted(chain.certificates.items())
        ],
        "epilogue": _evidence_json(chain.epilogue),
    }


def rebuild_from(chain: Chain, height: int, block: Block) -> Chain:
    """Copy of ``chain`` with block ``height`` replaced and every later header re-linked."""
    blocks = list(chain.blocks)
    blocks[height] = block
    for h in range(height + 1, len(blocks)):
        old = blocks[h]
        hdr = replace(old.header, prev_hash=blocks[h - 1].digest)
        blocks[h] = Block(hdr, old.transactions, old.evidence_for_previous)
    return Chain(chain.n, chain.bits, dict(chain.initial_balances), blocks, chain.epilogue, dict(chain.certificates))
