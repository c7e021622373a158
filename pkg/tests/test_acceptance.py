"""Acceptance criteria, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line with the measured values
before asserting, so ``pytest -v`` output doubles as the acceptance report.
Tolerances are the published ones; nothing is tuned to the results.
"""
import math
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings

from decoyqkd import presets
from decoyqkd.analysis import (
    AnalysisError,
    ProtocolParameters,
    analyze,
    binary_entropy,
    economic_s0_scan,
    key_rate_per_pulse,
    solve_single_photon_bound,
    worst_case_decoy_rate,
)
from decoyqkd.polarization import (
    CompensatorState,
    FiberTransform,
    PolarizationState,
    apply_rotation,
    bb84_qber,
    run_apc,
)
from decoyqkd.errors import NotConverged
from decoyqkd.protocol import run_session
from decoyqkd.simulation import ChannelConfig, expected_statistics, simulate_batch

from .conftest import load_fixture
from .test_analysis import closed_form_s1, entropy_oracle, link_instances


@pytest.fixture
def report(capsys):
    def emit(criterion: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} [{criterion}] {detail}")
        assert ok, detail
    return emit


def rel(a, b):
    return abs(a - b) / abs(b)


def table1_check(report, name, fixture, s1p, e1, rate):
    params, stats, _ = load_fixture(fixture)
    t0 = time.perf_counter()
    est = analyze(params, stats)
    elapsed = time.perf_counter() - t0
    checks = {
        "s1'": (est.s1_prime, s1p, 0.02),
        "E1": (est.e1_signal, e1, 0.025),
        "R": (est.rate_signal_per_pulse, rate, 0.02),
    }
    ok = elapsed < 1.0 and all(rel(got, want) <= tol for got, want, tol in checks.values())
    detail = ", ".join(f"{k}={got:.4g} (want {want:.4g} ±{tol:.1%}, dev {rel(got, want):.1%})"
                       for k, (got, want, tol) in checks.items())
    report(name, ok, f"{detail}, runtime {elapsed:.3f}s")


def test_c01_table1_75km(report):
    table1_check(report, "C1 Table 1 75.774 km", "table1_75km.json", 2.460e-4, 0.06099, 1.143e-5)


def test_c02_table1_102km(report):
    table1_check(report, "C2 Table 1 102.714 km", "table1_102km.json", 1.558e-4, 0.05854, 6.706e-6)


def test_c03_rate_closure(report):
    results = []
    for fixture, tol in (("table1_75km.json", None), ("table1_102km.json", 0.005)):
        params, stats, doc = load_fixture(fixture)
        tab = doc["tabulated"]
        delta1 = tab["s1_prime"] * params.mu_prime * math.exp(-params.mu_prime) / stats.s_signal
        got = key_rate_per_pulse(stats.s_signal, delta1, stats.e_signal, tab["e1_signal"]).rate
        want = tab["rate_signal_per_pulse"]
        # rounded table inputs only support 3 s.f. at 102 km; see ledger
        ok = f"{got:.3e}" == f"{want:.3e}" if tol is None else rel(got, want) <= tol
        results.append((ok, f"{fixture}: {got:.4e} vs {want:.4e}"))
    report("C3 rate closure", all(r[0] for r in results), "; ".join(r[1] for r in results))


def test_c04_efficiency_ratio(report):
    parts, ok = [], True
    for fixture, want in (("table1_75km.json", 0.253), ("table1_102km.json", 0.275)):
        params, stats, _ = load_fixture(fixture)
        got = analyze(params, stats).efficiency_ratio
        ok &= rel(got, want) <= 0.05
        parts.append(f"{fixture}: {got:.3f} (want {want} ±5%)")
    report("C4 efficiency ratio", ok, "; ".join(parts))


def random_instances(n, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        mu = rng.uniform(0.05, 0.4)
        params = ProtocolParameters(
            mu=mu, mu_prime=rng.uniform(mu + 0.15, 0.9),
            class_mix=tuple(rng.uniform([2, 1, 0.5], [8, 6, 2])),
            n_total=int(rng.integers(10**9, 10**11)),
            confidence_multiplier=1e-12,
        )
        channel = ChannelConfig(rng.uniform(10, 32), rng.uniform(1e-7, 1e-5), rng.uniform(0.0, 0.04))
        yield params, expected_statistics(channel, params)


def test_c05_oracle_equivalence(report):
    instances = list(random_instances(1000, seed=5))
    worst, solved = 0.0, 0
    t0 = time.perf_counter()
    for params, stats in instances:
        b = solve_single_photon_bound(params, stats, stats.s_vacuum)
        oracle = closed_form_s1(params.mu, params.mu_prime, stats.s_decoy, stats.s_signal, stats.s_vacuum)
        worst = max(worst, rel(b.s1, oracle))
        solved += 1
    elapsed = time.perf_counter() - t0
    report("C5 oracle equivalence", solved == 1000 and worst <= 1e-9 and elapsed < 5.0,
           f"{solved} instances, max rel dev {worst:.2e} (tol 1e-9), runtime {elapsed:.2f}s")


def test_c06_monte_carlo_consistency(report):
    params = presets.paper_params()
    channel = ChannelConfig(34.8, 9.174e-6, presets.channel_75km().misalignment_error)
    expected = expected_statistics(channel, params)
    worst_z, t0 = 0.0, time.perf_counter()
    for seed in (0, 1, 2):
        stats = simulate_batch(10_000_000, params, channel, seed)
        for cls in ("signal", "decoy", "vacuum"):
            n, p = stats.count(cls), expected.rate(cls)
            worst_z = max(worst_z, abs(stats.rate(cls) - p) / math.sqrt(p * (1 - p) / n))
        for cls in ("signal", "decoy"):
            clicks = stats.count(cls) * stats.rate(cls)
            e = getattr(expected, f"e_{cls}")
            worst_z = max(worst_z, abs(getattr(stats, f"e_{cls}") - e) / math.sqrt(e * (1 - e) / clicks))
    elapsed = time.perf_counter() - t0
    report("C6 Monte Carlo consistency", worst_z <= 4.0 and elapsed < 60.0,
           f"max |z| = {worst_z:.2f} over 3 seeds x 5 statistics (tol 4), runtime {elapsed:.1f}s")


def test_c07_scan_dominance(report):
    violations = []

    @settings(max_examples=500, database=None, derandomize=True, deadline=None,
              suppress_health_check=[HealthCheck.too_slow])
    @given(link_instances())
    def check(inst):
        params, stats = inst
        try:
            worst = worst_case_decoy_rate(params, stats)
        except AnalysisError:
            worst = 0.0
        scan = economic_s0_scan(params, stats).min_rate
        if scan < worst * (1 - 1e-12):
            violations.append((scan, worst))

    check()
    params, stats, doc = load_fixture("fig3_13km.json")
    scan = economic_s0_scan(params, stats, doc["scan"]["r0_max"], doc["scan"]["grid_points"]).min_rate
    worst = worst_case_decoy_rate(params, stats)
    ok = not violations and scan >= worst
    report("C7 economic-scan dominance", ok,
           f"500 instances, {len(violations)} violations; 13.448 km scan min {scan:.4e} >= worst case {worst:.4e}")


@pytest.mark.slow
def test_c08_end_to_end_session(report):
    params = presets.paper_params(n_total=500_000_000)
    channel = presets.channel_75km()
    closed = analyze(params, expected_statistics(channel, params)).rate_signal_per_pulse
    t0 = time.perf_counter()
    first = run_session(500_000_000, params, channel, seed=1)
    second = run_session(500_000_000, params, channel, seed=1)
    elapsed = time.perf_counter() - t0
    got = first.estimate.rate_signal_per_pulse if first.estimate else 0.0
    deterministic = first.to_dict() == second.to_dict()
    ok = rel(got, closed) <= 0.15 and deterministic and elapsed < 600
    report("C8 end-to-end session", ok,
           f"R = {got:.4e} vs closed form {closed:.4e} (dev {rel(got, closed):.1%}, tol 15%), "
           f"rerun identical: {deterministic}, two runs {elapsed:.0f}s, failure: {first.failure}")


def test_c09_apc_loop(report):
    converged, qbers, monotone = 0, [], True
    for seed in range(100):
        rng = np.random.default_rng(seed)
        fiber = FiberTransform.random(rng)
        try:
            run = run_apc(fiber, CompensatorState(), 0.985, 500, randomness=rng)
        except NotConverged as exc:
            run = exc.trace
        objective = [min(r.v_h, r.v_plus) for r in run.trace]
        monotone &= all(b >= a for a, b in zip(objective, objective[1:]))
        if run.converged:
            converged += 1
            qbers.append(bb84_qber(fiber, run.compensator, 20_000, seed))
    ok = converged >= 95 and monotone and max(qbers) <= 0.016 + 0.01
    report("C9 APC loop", ok, f"{converged}/100 converged in 500 iterations, non-decreasing: {monotone}, "
                             f"max BB84 QBER {max(qbers):.4f} (tol 0.026)")


def test_c10_entropy_and_isometry(report):
    rng = np.random.default_rng(10)
    xs = rng.random(2000)
    sym = max(abs(binary_entropy(x) - binary_entropy(1 - x)) for x in xs)
    acc = max(abs(binary_entropy(float(x)) - entropy_oracle(repr(float(x)))) for x in xs[:200])
    extremes = (binary_entropy(0.0), binary_entropy(1.0), binary_entropy(0.5))
    norm_err = 0.0
    for _ in range(2000):
        v = rng.normal(size=3)
        s = PolarizationState(v / np.linalg.norm(v))
        axis = rng.normal(size=3)
        out = apply_rotation(s, axis / np.linalg.norm(axis), rng.uniform(-10, 10))
        out = FiberTransform.random(rng).apply(out)
        final = CompensatorState(tuple(rng.uniform(0, 2 * math.pi, 4))).matrix @ out.stokes
        norm_err = max(norm_err, abs(np.linalg.norm(final) - 1.0))
    ok = sym <= 1e-12 and acc <= 1e-12 and extremes == (0.0, 0.0, 1.0) and norm_err <= 1e-9
    report("C10 entropy/isometry", ok, f"H symmetry err {sym:.1e}, H vs 40-digit oracle {acc:.1e}, "
                                       f"extremes {extremes}, sphere norm err {norm_err:.1e}")
