"""The ten acceptance criteria, one test each; every test records a PASS/FAIL line."""
from __future__ import annotations

import csv
import hashlib
import math
import random
import time
from fractions import Fraction

import numpy as np

from qrchain.auth.experiments import exhaustive_axu_gf256, substitution_forgery
from qrchain.cli import main
from qrchain.keyrate import ChannelParams, LinkGeometry, alignment_error, arm_transmittance, phase_error, rate_bps
from qrchain.ledger import audit_chain
from qrchain.planner import DemandParams, bits_per_transaction, key_demand, max_tps
from qrchain.sim.config import (
    Adversary,
    ConsensusTiming,
    DelayModel,
    KeyConfig,
    ScenarioConfig,
    bundled_scenarios,
    load_scenario,
)
from qrchain.sim.harness import run, run_with_outputs, sustained_tps
from qrchain.sim.keytrace import run_key_trace
from qrchain.tamper import build_honest_chain, mutations

DEFAULT = ChannelParams()


def test_criterion_01_demand_model_exact(criterion):
    t0 = time.perf_counter()
    rng = random.Random(1)
    mismatches = 0
    for _ in range(100):
        N, T, B = rng.randint(2, 200), rng.randint(0, 5000), rng.randint(1, 5000)
        P, S = rng.randint(1, 6), rng.choice([16, 32, 64, 128, 256])
        one_line = T * ((N - 1) * S * (1 + P * N / B))
        mismatches += key_demand(DemandParams(N, T, B, P, S)) != one_line
    base = bits_per_transaction(20, 2500, 3, 64)
    strat = bits_per_transaction(20, 2500, 3, 64, stratification_overhead=True)
    overhead = Fraction(strat) / Fraction(base) - 1
    ok_overhead = abs(overhead - Fraction(4, 10_000)) < Fraction(1, 10**15)
    dt = time.perf_counter() - t0
    criterion(1, mismatches == 0 and ok_overhead and dt < 1,
              f"100 demand tuples, {mismatches} mismatches; overhead at B=2500 = {float(overhead) * 100:.6f}% "
              f"({dt * 1000:.1f} ms)")


def test_criterion_02_rate_subterms(criterion):
    em = alignment_error(16)
    ok = abs(em - (0.5 - math.sin(math.pi / 8) / (math.pi / 4))) < 1e-12
    worst = 0.0
    for L in (0, 12.5, 50, 100, 333.3, 600):
        for alpha, eta in ((0.2, 0.9), (0.16, 0.5), (0.25, 1.0)):
            p = ChannelParams(alpha=alpha, eta_det=eta)
            worst = max(worst, abs(arm_transmittance(p, LinkGeometry(L)) - eta * 10 ** (-alpha * L / 20)))
    for e_opt in (0.0, 0.01, 0.02, 0.05):
        for sigma in (0.0, 0.1, 0.3, 0.6):
            for M in (4, 16, 64):
                e_phy, e_ph = phase_error(DEFAULT.with_(e_opt=e_opt, sigma_phi=sigma, M=M))
                ref_phy = e_opt + sigma ** 2 / 4
                e_m = 0.5 - math.sin(2 * math.pi / M) / (4 * math.pi / M)
                ref_ph = ref_phy + e_m - ref_phy * e_m
                worst = max(worst, abs(e_phy - ref_phy), abs(e_ph - ref_ph))
    criterion(2, ok and worst < 1e-12, f"E_M(16) = {em:.12f}; worst sub-term deviation {worst:.1e}")


def test_criterion_03_sqrt_eta_scaling(criterion):
    t0 = time.perf_counter()
    Ls = np.linspace(200, 300, 21)
    slope = np.polyfit(Ls, [math.log10(rate_bps(DEFAULT, L)) for L in Ls], 1)[0]
    target = -DEFAULT.alpha / 20
    err = abs(slope - target) / abs(target)
    dt = time.perf_counter() - t0
    criterion(3, err <= 0.2 and dt < 1, f"slope {slope:.5f}/km vs {target:.5f}/km ({err * 100:.1f}% off, {dt:.2f} s)")


def test_criterion_04_reproduction_table(criterion, tmp_path):
    t0 = time.perf_counter()
    code = main(["--reproduce-paper", "--out", str(tmp_path / "rp")])
    dt = time.perf_counter() - t0
    with open(tmp_path / "rp" / "comparison.csv") as fh:
        table = {r["item"]: r for r in csv.DictReader(fh)}
    needed = ["r_max.ordering", "r_max.N4_T10_km", "r_max.N8_T100_km", "r_max.N16_T300_km", "r_max.N32_T1000_km",
              "max_tps.R50_N20_B2500_S64", "block_size.tps_B3000_over_B2000", "tag_length.tps_S64_over_S128"]
    failed = [k for k in needed if table.get(k, {}).get("pass") != "1"]
    criterion(4, code == 0 and not failed and dt < 30,
              f"R_max {table['r_max.ordering']['achieved']} km, max_tps {table['max_tps.R50_N20_B2500_S64']['achieved']}"
              f", B ratio {table['block_size.tps_B3000_over_B2000']['achieved']}, S_key ratio "
              f"{table['tag_length.tps_S64_over_S128']['achieved']}; failed {failed or 'none'} ({dt:.1f} s)")


def test_criterion_05_forgery_bound(criterion):
    t0 = time.perf_counter()
    planted = substitution_forgery(bits=16, trials=10**7, data_blocks=4, strategy="planted", seed=5)
    uniform = substitution_forgery(bits=16, trials=10**7, data_blocks=4, strategy="random", seed=6)
    axu = exhaustive_axu_gf256(samples=1000, seed=0)
    dt = time.perf_counter() - t0
    ok = (planted.rate <= 3 * float(planted.bound) and uniform.rate <= 3 * float(uniform.bound)
          and axu.violations == 0 and dt < 120)
    criterion(5, ok, f"16-bit tag, 1e7 forgeries: {planted.ratio_to_bound:.2f}x bound (planted), "
                     f"{uniform.ratio_to_bound:.2f}x (random); GF(2^8) AXU: {axu.violations} violations in "
                     f"{axu.samples} triples ({dt:.1f} s)")


def bft_config(kind: str, seed: int) -> ScenarioConfig:
    return ScenarioConfig(n=4, f=1, offered_tps=15, duration_s=1.5, drain_s=2.5, seed=seed, trace=False,
                          pool_sample_ms=0, delay=DelayModel("uniform", min_ms=1, max_ms=20),
                          consensus=ConsensusTiming(base_timeout_ms=250, batch_wait_ms=150, tx_timeout_ms=600),
                          adversaries=(Adversary(kind, seed % 4),))


def test_criterion_06_bft_safety_sweep(criterion):
    t0 = time.perf_counter()
    unsafe, not_live, unverified = {}, {}, 0
    for kind in ("equivocating_leader", "silent_replica", "censoring_leader"):
        unsafe[kind] = not_live[kind] = 0
        for seed in range(1000):
            m = run(bft_config(kind, seed))
            unsafe[kind] += not m.safe
            unverified += m.messages["acted_unverified"]
            if kind != "equivocating_leader":
                live = (m.liveness["honest_unfinalized"] == 0
                        and m.liveness["max_view_changes_per_tx"] <= m.f + 1)
                not_live[kind] += not live
    dt = time.perf_counter() - t0
    ok = not any(unsafe.values()) and not any(not_live.values()) and unverified == 0 and dt < 300
    criterion(6, ok, f"3000 runs, safety violations {sum(unsafe.values())}, liveness misses (crash/censor) "
                     f"{not_live['silent_replica']}/{not_live['censoring_leader']}, acted unverified {unverified} "
                     f"({dt:.0f} s)")


def test_criterion_07_audit_soundness(criterion):
    t0 = time.perf_counter()
    honest_bad = 0
    for seed in range(100):
        m = run(ScenarioConfig(n=4, f=1, offered_tps=10, duration_s=2, drain_s=2, seed=seed, trace=False,
                               pool_sample_ms=0))
        honest_bad += not (m.audit["ok"] and m.audit["blocks_audited"] == m.finalized_blocks > 0)
    chain = build_honest_chain(n=4, blocks=3, txs_per_block=3, seed=0)
    assert audit_chain(chain).ok
    total = undetected = 0
    for mut in mutations(chain):
        total += 1
        undetected += audit_chain(mut.chain).ok
    lr = run(ScenarioConfig(n=4, f=1, offered_tps=10, duration_s=3, drain_s=3, seed=0, trace=False, pool_sample_ms=0,
                            adversaries=(Adversary("long_range_forger", params={"attempts": 1000}),)))
    forged = lr.adversaries["long_range"]
    dt = time.perf_counter() - t0
    ok = (honest_bad == 0 and total > 0 and undetected == 0 and forged["attempts"] == 1000
          and forged["adopted"] == 0 and forged["verified"] == 0 and dt < 120)
    criterion(7, ok, f"honest runs failing audit {honest_bad}/100; mutations detected {total - undetected}/{total}; "
                     f"forged chains accepted {forged['adopted']}/{forged['attempts']} ({dt:.1f} s)")


def test_criterion_08_one_time_discipline(criterion):
    t0 = time.perf_counter()
    r = run_key_trace(10**5, n=4, seed=0)
    dt = time.perf_counter() - t0
    criterion(8, r.ok and r.reservations > 0 and dt < 60,
              f"1e5 events, {r.reservations} reservations, {r.duplicates} duplicates, "
              f"{r.conservation_failures} conservation failures ({dt:.1f} s)")


def test_criterion_09_sustained_vs_planner(criterion):
    t0 = time.perf_counter()
    plan = max_tps(DEFAULT, 50, 20)
    cfg = ScenarioConfig(n=20, f=6, radius_km=50, duration_s=20, drain_s=8, seed=0,
                         consensus=ConsensusTiming(batch_wait_ms=6000, base_timeout_ms=5000, tx_timeout_ms=60000),
                         keys=KeyConfig(seed_bits=2048))
    res = sustained_tps(cfg, 0.75 * plan, 1.25 * plan)
    dt = time.perf_counter() - t0
    err = res.tps / plan - 1
    criterion(9, abs(err) <= 0.15 and dt < 300,
              f"sustained {res.tps:.1f} TPS vs planner {plan:.1f} TPS ({err * 100:+.1f}%, {dt:.0f} s)")


def test_criterion_10_determinism(criterion, tmp_path):
    t0 = time.perf_counter()
    lib = bundled_scenarios()
    differing = []
    for name, path in lib.items():
        cfg = load_scenario(path)
        digests = []
        for rep in ("a", "b"):
            d = tmp_path / name / rep
            run_with_outputs(cfg, d)
            digests.append(tuple(hashlib.sha256((d / f).read_bytes()).hexdigest()
                                 for f in ("metrics.json", "trace.jsonl", "pools.csv")))
        if digests[0] != digests[1]:
            differing.append(name)
    dt = time.perf_counter() - t0
    criterion(10, len(lib) >= 20 and not differing and dt < 120,
              f"{len(lib)} scenarios rerun, {len(differing)} differ ({dt:.1f} s)")
