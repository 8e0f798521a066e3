"""Key demand, supply-demand equilibrium and the throughput analyses built on them.

Radius R is the distance from each terminal node to the central relay, so a
node-to-node link has total length L = 2R.  By default the supply of one link
is compared directly against the network-wide demand (links generate keys in
parallel); ``tdm=True`` divides the supply by the number of node pairs for a
relay that serves one pair at a time.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

from .keyrate import ChannelParams, rate_bps

BRACKET_KM = (0.0, 500.0)
REL_TOL = 1e-6
MAX_ITER = 200


@dataclass(frozen=True)
class DemandParams:
    N: int
    T: float
    B: int = 2500
    P: int = 3
    S_key: int = 64
    stratification_overhead: bool = False
    count_hash_keys: bool = False

    def __post_init__(self) -> None:
        if int(self.N) != self.N or self.N < 2:
            raise ValueError("N must be an integer >= 2")
        if self.T < 0:
            raise ValueError("T must be non-negative")
        if self.B < 1 or self.P < 1 or self.S_key < 1:
            raise ValueError("B, P and S_key must be >= 1")


@dataclass(frozen=True)
class EquilibriumResult:
    r_max_km: float
    supply_at_rmax: float
    demand: float
    converged: bool
    iterations: int = 0

    @property
    def residual(self) -> float:
        if self.demand == 0:
            return 0.0
        return abs(self.supply_at_rmax - self.demand) / self.demand


def bits_per_transaction(N: int, B: int, P: int, S_key: int, *,
                         stratification_overhead: bool = False,
                         count_hash_keys: bool = False) -> float:
    """Key bits consumed network-wide per finalized transaction."""
    per_tx = (N - 1) * S_key * (1 + P * N / B)
    if stratification_overhead:
        per_tx *= 1 + 1 / B
    if count_hash_keys:
        per_tx *= 2
    return per_tx


def key_demand(d: DemandParams) -> float:
    return d.T * bits_per_transaction(
        d.N, d.B, d.P, d.S_key,
        stratification_overhead=d.stratification_overhead,
        count_hash_keys=d.count_hash_keys,
    )


def link_count(N: int, topology: str = "mesh") -> int:
    if N < 1:
        raise ValueError("N must be >= 1")
    if topology == "mesh":
        return N * (N - 1) // 2
    if topology == "star":
        return N
    raise ValueError(f"unknown topology {topology!r}")


def supply_rate(p: ChannelParams, radius_km: float, N: int | None = None,
                *, tdm: bool = False) -> float:
    rate = rate_bps(p, 2.0 * radius_km)
    if tdm:
        if N is None:
            raise ValueError("tdm supply needs N")
        rate /= link_count(N, "mesh")
    return rate


def max_radius(p: ChannelParams, d: DemandParams, *, tdm: bool = False) -> EquilibriumResult:
    demand = key_demand(d)
    if demand <= 0:
        raise ValueError("equilibrium needs positive demand")

    def supply(r: float) -> float:
        return supply_rate(p, r, d.N, tdm=tdm)

    s0 = supply(0.0)
    if s0 <= demand:
        return EquilibriumResult(0.0, s0, demand, False)

    lo, hi = BRACKET_KM
    r, s = lo, s0
    for it in range(1, MAX_ITER + 1):
        r = 0.5 * (lo + hi)
        s = supply(r)
        if abs(s - demand) / demand < REL_TOL:
            return EquilibriumResult(r, s, demand, True, it)
        if s > demand:
            lo = r
        else:
            hi = r
    return EquilibriumResult(r, s, demand, False, MAX_ITER)


def max_tps(p: ChannelParams, radius_km: float, N: int, B: int = 2500, P: int = 3,
            S_key: int = 64, *, tdm: bool = False, stratification_overhead: bool = False,
            count_hash_keys: bool = False) -> float:
    per_tx = bits_per_transaction(N, B, P, S_key,
                                  stratification_overhead=stratification_overhead,
                                  count_hash_keys=count_hash_keys)
    return max(0.0, supply_rate(p, radius_km, N, tdm=tdm) / per_tx)


def _rates(p: ChannelParams, distances: Sequence[float], workers: int) -> list[float]:
    if workers > 1 and len(distances) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(rate_bps, [p] * len(distances), distances))
    return [rate_bps(p, L) for L in distances]


def _check_grid(values: Sequence[float], name: str) -> None:
    if not values:
        raise ValueError(f"{name} must be non-empty")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ValueError(f"{name} must be strictly ascending")


@dataclass(frozen=True)
class FeasibilityGrid:
    radii_km: tuple[float, ...]
    nodes: tuple[int, ...]
    tps: tuple[tuple[float, ...], ...]  # tps[i][j] for radii[i], nodes[j]

    def log10_tps(self) -> list[list[float | None]]:
        """log10 of T_max; None marks infeasible (zero-throughput) cells."""
        return [[math.log10(t) if t > 0 else None for t in row] for row in self.tps]

    def rows(self) -> Iterable[tuple[float, int, float, float | None, bool]]:
        for i, r in enumerate(self.radii_km):
            for j, n in enumerate(self.nodes):
                t = self.tps[i][j]
                yield r, n, t, (math.log10(t) if t > 0 else None), t > 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["radius_km", "n_nodes", "max_tps", "log10_tps", "feasible"])
        for r, n, t, lg, ok in self.rows():
            w.writerow([repr(float(r)), n, repr(t), "" if lg is None else repr(lg), int(ok)])
        return buf.getvalue()


def feasibility_grid(p: ChannelParams, r_grid: Sequence[float], n_grid: Sequence[int],
                     B: int = 2500, P: int = 3, S_key: int = 64, *, tdm: bool = False,
                     workers: int = 1) -> FeasibilityGrid:
    _check_grid(r_grid, "r_grid")
    _check_grid(n_grid, "n_grid")
    rates = _rates(p, [2.0 * r for r in r_grid], workers)
    table = []
    for rate in rates:
        row = []
        for n in n_grid:
            supply = rate / link_count(n) if tdm else rate
            row.append(max(0.0, supply / bits_per_transaction(n, B, P, S_key)))
        table.append(tuple(row))
    return FeasibilityGrid(tuple(float(r) for r in r_grid), tuple(int(n) for n in n_grid),
                           tuple(table))


_AXES = {"sigma_phi": "sigma_phi", "intrinsic_qber": "e_opt"}


def sensitivity_sweep(p: ChannelParams, radius_km: float, N: int, axis: str,
                      values: Sequence[float], B: int = 2500, P: int = 3,
                      S_key: int = 64, *, tdm: bool = False) -> list[tuple[float, float]]:
    """Throughput as one error parameter varies; returns (value, tps) pairs."""
    if axis not in _AXES:
        raise ValueError(f"axis must be one of {sorted(_AXES)}")
    _check_grid(values, "values")
    out = []
    for v in values:
        q = p.with_(**{_AXES[axis]: v})
        out.append((float(v), max_tps(q, radius_km, N, B, P, S_key, tdm=tdm)))
    return out


def joint_sensitivity(p: ChannelParams, radius_km: float, N: int,
                      sigma_values: Sequence[float], qber_values: Sequence[float],
                      B: int = 2500, P: int = 3, S_key: int = 64,
                      *, tdm: bool = False) -> list[list[float]]:
    """surface[i][j] = tps at sigma_values[i], qber_values[j]."""
    _check_grid(sigma_values, "sigma_values")
    _check_grid(qber_values, "qber_values")
    return [
        [max_tps(p.with_(sigma_phi=s, e_opt=e), radius_km, N, B, P, S_key, tdm=tdm)
         for e in qber_values]
        for s in sigma_values
    ]


def cutoff(p: ChannelParams, radius_km: float, N: int, axis: str, lo: float, hi: float,
           B: int = 2500, P: int = 3, S_key: int = 64, tol: float = 1e-6) -> float:
    """Smallest parameter value on ``axis`` at which throughput drops to zero."""
    name = _AXES[axis]

    def alive(v: float) -> bool:
        return max_tps(p.with_(**{name: v}), radius_km, N, B, P, S_key) > 0

    if not alive(lo):
        return lo
    if alive(hi):
        return hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if alive(mid):
            lo = mid
        else:
            hi = mid
    return hi


def protocol_sweep(p: ChannelParams, radius_km: float, N: int,
                   block_sizes: Sequence[int], key_sizes: Sequence[int], P: int = 3,
                   *, tdm: bool = False) -> list[tuple[int, int, float]]:
    """Throughput over block size and tag length; rows of (B, S_key, tps)."""
    supply = supply_rate(p, radius_km, N, tdm=tdm)
    rows = []
    for s in key_sizes:
        for b in block_sizes:
            rows.append((int(b), int(s), max(0.0, supply / bits_per_transaction(N, b, P, s))))
    return rows
