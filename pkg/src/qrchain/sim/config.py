"""Scenario configuration: one JSON document per run.

Times in the file are milliseconds (or seconds where the key says so); the
simulator itself works in integer microseconds.  Unknown keys are rejected so
that typos do not silently fall back to defaults.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from ..keyrate import ChannelParams

ADVERSARY_KINDS = (
    "equivocating_leader",
    "censoring_leader",
    "silent_replica",
    "framing_receiver",
    "relay_dos",
    "long_range_forger",
)
REPLICA_KINDS = {"equivocating_leader", "censoring_leader", "silent_replica", "framing_receiver"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DelayModel:
    kind: str = "fixed"
    ms: float = 5.0
    min_ms: float = 1.0
    max_ms: float = 20.0

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "uniform"):
            raise ConfigError(f"unknown delay kind {self.kind!r}")
        if self.ms < 0 or self.min_ms < 0 or self.max_ms < self.min_ms:
            raise ConfigError("delays must be non-negative with min_ms <= max_ms")


@dataclass(frozen=True)
class Adversary:
    kind: str
    replica: int | None = None
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in ADVERSARY_KINDS:
            raise ConfigError(f"unknown adversary kind {self.kind!r}")
        if self.kind in REPLICA_KINDS and self.replica is None:
            raise ConfigError(f"{self.kind} needs a replica id")


@dataclass(frozen=True)
class ConsensusTiming:
    base_timeout_ms: float = 1000.0
    timeout_backoff: float = 2.0
    batch_wait_ms: float = 200.0
    evidence_wait_ms: float = 50.0
    tx_timeout_ms: float = 3000.0


@dataclass(frozen=True)
class KeyConfig:
    seed_bits: int = 65536
    tdm: bool = False
    count_hash_keys: bool = False
    low_watermark_bits: int = 0
    bootstrap_reserve_bits: int = 0
    postprocessing_fraction: float = 0.0
    adaptive_ratio: bool = True
    consensus_reserve_bundles: int = 4


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    n: int = 4
    f: int = 1
    radius_km: float = 50.0
    channel: dict[str, Any] = field(default_factory=dict)
    block_size: int = 2500
    key_bits: int = 64
    rounds: int = 3
    offered_tps: float = 10.0
    duration_s: float = 5.0
    drain_s: float = 2.0
    seed: int = 0
    delay: DelayModel = field(default_factory=DelayModel)
    replay_prob: float = 0.0
    adversaries: tuple[Adversary, ...] = ()
    consensus: ConsensusTiming = field(default_factory=ConsensusTiming)
    keys: KeyConfig = field(default_factory=KeyConfig)
    supply_bps: float | None = None
    tick_ms: float = 100.0
    balance: int = 10**12
    online_audit: bool = True
    stop_on_exhaustion: bool = False
    safety_labeled: bool = True
    unsafe_quorum: bool = False
    trace: bool = True
    pool_sample_ms: float = 1000.0
    conservation_every_event: bool | None = None

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ConfigError("need at least two replicas")
        if self.f < 0:
            raise ConfigError("f must be non-negative")
        if self.n < 3 * self.f + 1 and not self.unsafe_quorum:
            raise ConfigError(f"n={self.n} < 3f+1 for f={self.f}; set unsafe_quorum to run it anyway")
        if self.offered_tps < 0 or self.duration_s <= 0 or self.drain_s < 0 or self.tick_ms <= 0:
            raise ConfigError("load and durations must be positive")
        if not 0 <= self.replay_prob <= 1:
            raise ConfigError("replay_prob must lie in [0, 1]")
        seen = set()
        for a in self.adversaries:
            if a.replica is not None:
                if not 0 <= a.replica < self.n:
                    raise ConfigError(f"adversary replica {a.replica} out of range")
                if a.replica in seen:
                    raise ConfigError(f"replica {a.replica} has two adversary roles")
                seen.add(a.replica)
        byz = sum(1 for a in self.adversaries if a.kind in REPLICA_KINDS)
        if self.safety_labeled and byz > self.f:
            raise ConfigError(f"{byz} Byzantine replicas exceed f={self.f} in a safety-labeled scenario")
        ChannelParams.from_dict(self.channel)  # validates overrides

    @property
    def channel_params(self) -> ChannelParams:
        return ChannelParams.from_dict(self.channel)

    def with_(self, **changes: Any) -> "ScenarioConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["adversaries"] = [asdict(a) for a in self.adversaries]
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ScenarioConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown scenario keys: {sorted(extra)}")
        nested = {"delay": DelayModel, "consensus": ConsensusTiming, "keys": KeyConfig}
        for key, typ in nested.items():
            if key in data:
                sub = dict(data[key])
                bad = set(sub) - {f.name for f in fields(typ)}
                if bad:
                    raise ConfigError(f"unknown {key} keys: {sorted(bad)}")
                data[key] = typ(**sub)
        if "adversaries" in data:
            data["adversaries"] = tuple(
                Adversary(a["kind"], a.get("replica"), dict(a.get("params", {}))) for a in data["adversaries"])
        if "f" not in data and "n" in data:
            data["f"] = (data["n"] - 1) // 3
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_scenario(path: str | Path) -> ScenarioConfig:
    with open(path) as fh:
        return ScenarioConfig.from_dict(json.load(fh))


def bundled_scenarios() -> dict[str, Path]:
    here = Path(__file__).resolve().parent.parent / "scenarios"
    return {p.stem: p for p in sorted(here.glob("*.json"))}
