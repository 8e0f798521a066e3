"""Asymptotic twin-field QKD key-rate model and the PLOB repeaterless bound.

All functions are pure. Distances are kilometres, rates are bits per second.
The decoy-state gain model (yields, gain, QBER) is the standard one: the
per-arm transmittance acts as the effective click probability and two relay
detectors contribute dark counts.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Any

MU_LOWER = 1e-3
MU_UPPER = 1.0
MU_TOL = 1e-4
_MU_GRID_POINTS = 48
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0

# -log2(1 - eta) is unbounded as eta -> 1; report this many bits per pulse.
PLOB_SATURATION_BITS = 64.0


@dataclass(frozen=True)
class ChannelParams:
    """Physical-layer parameters of one twin-field link."""

    alpha: float = 0.2  # dB/km
    eta_det: float = 0.9
    dark_rate: float = 10.0  # Hz
    rep_rate: float = 1e9  # pulses/s
    M: int = 16
    mu: float | str = "auto"
    e_opt: float = 0.02
    sigma_phi: float = 0.1  # rad
    f_EC: float = 1.1

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.eta_det <= 1:
            raise ValueError("eta_det must lie in (0, 1]")
        if self.dark_rate < 0:
            raise ValueError("dark_rate must be non-negative")
        if not self.rep_rate > 0:
            raise ValueError("rep_rate must be positive")
        if int(self.M) != self.M or self.M < 2:
            raise ValueError("M must be an integer >= 2")
        if self.f_EC < 1:
            raise ValueError("f_EC must be >= 1")
        if not 0 <= self.e_opt < 0.5:
            raise ValueError("e_opt must lie in [0, 0.5)")
        if self.sigma_phi < 0:
            raise ValueError("sigma_phi must be non-negative")
        if isinstance(self.mu, str):
            if self.mu != "auto":
                raise ValueError("mu must be a positive number or 'auto'")
        elif not self.mu > 0:
            raise ValueError("mu must be positive")
        if not self.p_d < 1:
            raise ValueError("dark_rate / rep_rate must be < 1")

    @property
    def p_d(self) -> float:
        """Per-pulse dark-count probability of one detector."""
        return self.dark_rate / self.rep_rate

    def with_(self, **changes: Any) -> "ChannelParams":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ChannelParams":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown channel parameters: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class LinkGeometry:
    total_distance_km: float

    def __post_init__(self) -> None:
        if self.total_distance_km < 0:
            raise ValueError("distance must be non-negative")


@dataclass(frozen=True)
class RateBreakdown:
    eta_arm: float
    E_M: float
    e_noise: float
    e_phy: float
    e_ph: float
    Y0: float
    Y1: float
    Q_mu: float
    E_mu: float
    mu: float
    raw_rate: float  # before the clamp at zero
    rate_bps: float

    @property
    def feasible(self) -> bool:
        return self.rate_bps > 0


def _clamp_err(x: float) -> float:
    return min(0.5, max(0.0, x))


def binary_entropy(x: float) -> float:
    if x <= 0.0 or x >= 1.0:
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


def arm_transmittance(p: ChannelParams, g: LinkGeometry) -> float:
    """Transmittance of one arm (L/2 of fibre) including detector efficiency."""
    return p.eta_det * 10.0 ** (-p.alpha * g.total_distance_km / 20.0)


def alignment_error(M: int) -> float:
    if int(M) != M or M < 2:
        raise ValueError("M must be an integer >= 2")
    x = 2.0 * math.pi / M
    return 0.5 - math.sin(x) / (2.0 * x)


def _combine(e_phy: float, e_m: float) -> float:
    # probabilistic OR of two independent flip events
    return _clamp_err(e_phy + e_m - e_phy * e_m)


def phase_error(p: ChannelParams, M: int | None = None) -> tuple[float, float]:
    """Return (e_phy, e_ph) for the given parameters."""
    e_m = alignment_error(p.M if M is None else M)
    e_noise = _clamp_err(p.sigma_phi ** 2 / 4.0)
    e_phy = _clamp_err(p.e_opt + e_noise)
    return e_phy, _combine(e_phy, e_m)


def _evaluate(p: ChannelParams, eta: float, mu: float) -> RateBreakdown:
    e_m = alignment_error(p.M)
    e_noise = _clamp_err(p.sigma_phi ** 2 / 4.0)
    e_phy = _clamp_err(p.e_opt + e_noise)
    e_ph = _combine(e_phy, e_m)

    y0 = 2.0 * p.p_d
    y1 = 1.0 - (1.0 - y0) * (1.0 - eta)
    q_mu = 1.0 - (1.0 - y0) * math.exp(-eta * mu)
    if q_mu > 0:
        e_mu = _clamp_err((0.5 * y0 + e_ph * (q_mu - y0)) / q_mu)
    else:
        e_mu = 0.5

    bracket = mu * math.exp(-mu) * y1 * (1.0 - binary_entropy(e_ph)) \
        - p.f_EC * q_mu * binary_entropy(e_mu)
    raw = p.rep_rate / p.M * bracket
    return RateBreakdown(
        eta_arm=eta, E_M=e_m, e_noise=e_noise, e_phy=e_phy, e_ph=e_ph,
        Y0=y0, Y1=y1, Q_mu=q_mu, E_mu=e_mu, mu=mu,
        raw_rate=raw, rate_bps=max(0.0, raw),
    )


def _golden_max(fn, lo: float, hi: float, tol: float) -> float:
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = fn(c), fn(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = fn(d)
    return c if fc >= fd else d


def optimal_mu(p: ChannelParams, g: LinkGeometry) -> float:
    """Signal intensity in [1e-3, 1] maximising the unclamped rate.

    A coarse logarithmic scan brackets the maximum (the rate need not be
    unimodal near the cutoff), then golden-section search refines it.
    """
    eta = arm_transmittance(p, g)

    def f(mu: float) -> float:
        return _evaluate(p, eta, mu).raw_rate

    ratio = (MU_UPPER / MU_LOWER) ** (1.0 / (_MU_GRID_POINTS - 1))
    grid = [MU_LOWER * ratio ** i for i in range(_MU_GRID_POINTS - 1)] + [MU_UPPER]
    values = [f(m) for m in grid]
    best = max(range(len(grid)), key=lambda i: (values[i], -i))
    lo = grid[max(0, best - 1)]
    hi = grid[min(len(grid) - 1, best + 1)]
    refined = _golden_max(f, lo, hi, MU_TOL)
    return refined if f(refined) >= values[best] else grid[best]


def secret_key_rate(p: ChannelParams, g: LinkGeometry) -> RateBreakdown:
    eta = arm_transmittance(p, g)
    mu = optimal_mu(p, g) if p.mu == "auto" else float(p.mu)
    return _evaluate(p, eta, mu)


def rate_bps(p: ChannelParams, distance_km: float) -> float:
    return secret_key_rate(p, LinkGeometry(distance_km)).rate_bps


def plob_bound(p: ChannelParams, g: LinkGeometry) -> float:
    """Repeaterless capacity of the end-to-end channel, bits/s."""
    eta = p.eta_det * 10.0 ** (-p.alpha * g.total_distance_km / 10.0)
    if eta >= 1.0:
        return p.rep_rate * PLOB_SATURATION_BITS
    bits = -math.log2(1.0 - eta)
    return p.rep_rate * min(bits, PLOB_SATURATION_BITS)
