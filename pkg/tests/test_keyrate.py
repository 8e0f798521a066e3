from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qrchain.keyrate import (
    PLOB_SATURATION_BITS,
    ChannelParams,
    LinkGeometry,
    alignment_error,
    arm_transmittance,
    binary_entropy,
    phase_error,
    plob_bound,
    rate_bps,
    secret_key_rate,
)

FIXTURES = Path(__file__).parent / "fixtures"
DEFAULT = ChannelParams()


def test_transmittance_examples():
    p = ChannelParams(alpha=0.2, eta_det=0.9)
    assert arm_transmittance(p, LinkGeometry(100)) == pytest.approx(0.09, rel=1e-12)
    assert arm_transmittance(p, LinkGeometry(0)) == 0.9
    q = ChannelParams(alpha=0.2, eta_det=1.0)
    assert arm_transmittance(q, LinkGeometry(200)) == pytest.approx(0.01, rel=1e-12)


def test_alignment_error_values():
    assert alignment_error(16) == pytest.approx(0.012752, abs=1e-6)
    assert abs(alignment_error(16) - (0.5 - math.sin(math.pi / 8) / (math.pi / 4))) < 1e-12
    assert alignment_error(4) == pytest.approx(0.5 - 1 / math.pi, abs=1e-12)
    assert alignment_error(32) < alignment_error(16)
    with pytest.raises(ValueError):
        alignment_error(1)


def test_alignment_error_strictly_decreasing():
    vals = [alignment_error(m) for m in range(4, 400)]
    assert all(v >= 0 for v in vals)
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_phase_error_examples():
    p = DEFAULT.with_(sigma_phi=0.0, e_opt=0.0)
    assert phase_error(p, 16)[1] == alignment_error(16)
    e_phy, e_ph = phase_error(DEFAULT.with_(sigma_phi=0.4, e_opt=0.02), 16)
    assert e_phy == pytest.approx(0.06, abs=1e-12)
    assert e_ph == pytest.approx(0.06 + alignment_error(16) * 0.94, abs=1e-12)
    assert e_ph == pytest.approx(0.07199, abs=1e-5)
    assert phase_error(DEFAULT.with_(sigma_phi=2.0, e_opt=0.49), 16)[1] == 0.5


@given(st.floats(0, 0.49), st.floats(0, 1.4), st.integers(2, 64))
def test_phase_error_probabilistic_or_bounds(e_opt, sigma, m):
    e_phy, e_ph = phase_error(DEFAULT.with_(e_opt=e_opt, sigma_phi=sigma), m)
    e_m = alignment_error(m)
    assert 0 <= e_ph <= 0.5
    assert e_ph >= max(e_phy, e_m) - 1e-15
    assert e_ph <= e_phy + e_m + 1e-15


def test_binary_entropy_points():
    assert binary_entropy(0) == 0 and binary_entropy(1) == 0
    assert binary_entropy(0.5) == 1.0
    assert binary_entropy(0.11) == pytest.approx(0.4999, abs=1e-3)


def test_rate_matches_golden_file():
    golden = json.loads((FIXTURES / "golden_rate_100km.json").read_text())
    b = secret_key_rate(DEFAULT, LinkGeometry(golden["distance_km"]))
    assert b.rate_bps == pytest.approx(golden["rate_bps"], rel=golden["rel_tol"])
    assert b.mu == pytest.approx(golden["mu_opt"], abs=1e-3)


def _straight_line_rate(L, mu):
    # plain re-evaluation of the rate formulas, default parameters
    eta = 0.9 * 10 ** (-0.2 * L / 20)
    em = 0.5 - math.sin(2 * math.pi / 16) / (4 * math.pi / 16)
    ephy = 0.02 + 0.1 ** 2 / 4
    eph = ephy + em - ephy * em
    y0 = 2 * 10 / 1e9
    y1 = 1 - (1 - y0) * (1 - eta)
    q = 1 - (1 - y0) * math.exp(-eta * mu)
    e = (0.5 * y0 + eph * (q - y0)) / q
    h = lambda x: -x * math.log2(x) - (1 - x) * math.log2(1 - x)
    return 1e9 / 16 * (mu * math.exp(-mu) * y1 * (1 - h(eph)) - 1.1 * q * h(e))


@pytest.mark.parametrize("L,mu", [(10, 0.3), (100, 0.51), (250, 0.05), (400, 0.2)])
def test_fixed_mu_matches_straight_line(L, mu):
    b = secret_key_rate(DEFAULT.with_(mu=mu), LinkGeometry(L))
    assert b.raw_rate == pytest.approx(_straight_line_rate(L, mu), rel=1e-12)


def test_breakdown_ranges():
    for L in (0, 50, 300, 800):
        b = secret_key_rate(DEFAULT, LinkGeometry(L))
        for e in (b.E_M, b.e_noise, b.e_phy, b.e_ph, b.E_mu):
            assert 0 <= e <= 0.5
        assert 0 <= b.Q_mu <= 1
        assert b.rate_bps >= 0


def test_dark_count_regime_is_zero():
    # with the default calibration the cutoff sits near 640 km
    assert rate_bps(DEFAULT, 700) == 0.0
    assert rate_bps(DEFAULT, 1000) == 0.0
    assert not secret_key_rate(DEFAULT, LinkGeometry(700)).feasible


def test_noiseless_qber_reduces_to_alignment_error():
    p = ChannelParams(dark_rate=0.0, sigma_phi=0.0, e_opt=0.0, mu=0.4)
    b = secret_key_rate(p, LinkGeometry(80))
    assert b.E_mu == alignment_error(16)
    assert b.e_ph == alignment_error(16)


def test_sqrt_eta_slope():
    Ls = np.linspace(200, 300, 11)
    ys = [math.log10(rate_bps(DEFAULT, L)) for L in Ls]
    slope = np.polyfit(Ls, ys, 1)[0]
    target = -DEFAULT.alpha / 20
    assert abs(slope - target) <= 0.2 * abs(target)


SWEEPS = {
    "total_distance_km": np.linspace(0, 700, 50),
    "sigma_phi": np.linspace(0, 1.5, 50),
    "e_opt": np.linspace(0, 0.49, 50),
    "dark_rate": np.logspace(0, 6, 50),
}


@pytest.mark.parametrize("axis", sorted(SWEEPS))
def test_rate_non_increasing(axis):
    rates = []
    for v in SWEEPS[axis]:
        if axis == "total_distance_km":
            rates.append(rate_bps(DEFAULT, float(v)))
        else:
            rates.append(rate_bps(DEFAULT.with_(**{axis: float(v)}), 100))
    assert all(b <= a for a, b in zip(rates, rates[1:]))


@pytest.mark.parametrize("mu", [0.01, 0.05, 0.1, 0.2, 0.5])
def test_auto_mu_dominates_fixed(mu):
    for L in np.linspace(0, 650, 27):
        assert rate_bps(DEFAULT, float(L)) >= rate_bps(DEFAULT.with_(mu=mu), float(L))


def test_plob_examples():
    p = ChannelParams(eta_det=1.0)
    assert plob_bound(p, LinkGeometry(0)) == p.rep_rate * PLOB_SATURATION_BITS
    assert plob_bound(p, LinkGeometry(100)) == pytest.approx(-math.log2(0.99) * 1e9, rel=1e-12)
    assert plob_bound(p, LinkGeometry(100)) == pytest.approx(1.45e7, rel=1e-3)


def test_crossover_exists():
    Ls = range(0, 600, 5)
    above = [rate_bps(DEFAULT, L) > plob_bound(DEFAULT, LinkGeometry(L)) for L in Ls]
    first = above.index(True)
    assert first > 0
    # past the crossover the twin-field rate stays above the bound up to 595 km
    assert all(above[first:])


def test_rejects_bad_params():
    with pytest.raises(ValueError):
        ChannelParams(alpha=0)
    with pytest.raises(ValueError):
        ChannelParams(eta_det=1.5)
    with pytest.raises(ValueError):
        ChannelParams(M=1)
    with pytest.raises(ValueError):
        ChannelParams(mu="fast")
    with pytest.raises(ValueError):
        ChannelParams(dark_rate=2e9)
    with pytest.raises(ValueError):
        LinkGeometry(-1)


def test_params_dict_round_trip():
    p = DEFAULT.with_(mu=0.3, e_opt=0.03)
    assert ChannelParams.from_dict(p.to_dict()) == p
    with pytest.raises(ValueError):
        ChannelParams.from_dict({"bogus": 1})


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 600))
def test_rate_is_deterministic(L):
    assert rate_bps(DEFAULT, L) == rate_bps(DEFAULT, L)
