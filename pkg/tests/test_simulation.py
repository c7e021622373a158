import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from decoyqkd import presets
from decoyqkd._accel import HAVE_NUMBA
from decoyqkd.analysis import ProtocolParameters
from decoyqkd.errors import ValidationError
from decoyqkd.simulation import (
    PAPER_ATTENUATIONS_DB,
    BatchTally,
    ChannelConfig,
    distance_sweep,
    expected_rates,
    expected_statistics,
    fit_misalignment,
    sample_photon_number,
    simulate_batch,
    simulate_pulse,
    simulate_tallies,
    transmittance_from_db,
)
from decoyqkd.simulation.kernels import NUMBA_KERNELS, NUMPY_KERNELS, DetectionTables


def test_transmittance():
    assert transmittance_from_db(0.0) == 1.0
    assert transmittance_from_db(30.0) == pytest.approx(1e-3, rel=1e-12)
    with pytest.raises(ValueError):
        transmittance_from_db(-1.0)


def test_channel_validation():
    with pytest.raises(ValidationError) as exc:
        ChannelConfig(-3.0, dark_count_prob=2.0, vacuum_error=0.3, scheme="three")
    assert set(exc.value.problems) == {"total_attenuation_db", "dark_count_prob", "vacuum_error", "scheme"}
    ch = ChannelConfig(20.0, 1e-6, 0.01)
    assert ChannelConfig.from_dict(ch.to_dict()) == ch
    with pytest.raises(ValidationError):
        ChannelConfig.from_dict({"total_attenuation_db": 1, "color": "red"})


def test_expected_rates_closed_form():
    ch = ChannelConfig(34.8, 9.174e-6, 0.0107)
    eta = 10 ** (-3.48)
    s, e = expected_rates(ch, 0.6)
    assert s == pytest.approx(1 - (1 - 9.174e-6) * math.exp(-eta * 0.6), rel=1e-12)
    assert e * s == pytest.approx(0.5 * 9.174e-6 + 0.0107 * (1 - math.exp(-eta * 0.6)), rel=1e-12)
    assert expected_rates(ch, 0.0) == pytest.approx((9.174e-6, 0.5))
    assert expected_rates(ChannelConfig(30.0), 0.0) == (0.0, 0.0)


def test_presets_hit_tabulated_signal_qber():
    params = presets.paper_params()
    for channel, qber, s0 in ((presets.channel_75km(), 0.03231, 9.174e-6), (presets.channel_102km(), 0.03580, 6.711e-6)):
        stats = expected_statistics(channel, params)
        assert stats.e_signal == pytest.approx(qber, rel=1e-12)
        assert stats.s_vacuum == pytest.approx(s0, rel=1e-12)
    with pytest.raises(ValueError):
        fit_misalignment(10.0, 0.1, 0.6, 0.001)


def test_single_pulse_sampling():
    rng = np.random.default_rng(5)
    n = [sample_photon_number(0.6, rng) for _ in range(20000)]
    assert np.mean(n) == pytest.approx(0.6, abs=0.02)
    ch = ChannelConfig(3.0, 0.0, 0.0)
    assert simulate_pulse(0.6, ch, rng, photon_number=0) == (False, False)
    clicks = sum(simulate_pulse(0.6, ch, rng, photon_number=4).clicked for _ in range(4000))
    assert clicks / 4000 == pytest.approx(1 - (1 - ch.eta) ** 4, abs=0.02)
    with pytest.raises(ValueError):
        sample_photon_number(-0.1)


def test_single_pulse_rates_match_expectation():
    ch = ChannelConfig(6.0, 0.05, 0.1)
    rng = np.random.default_rng(11)
    outcomes = [simulate_pulse(0.5, ch, rng) for _ in range(40000)]
    s_exp, _ = expected_rates(ch, 0.5)
    s = np.mean([o.clicked for o in outcomes])
    assert abs(s - s_exp) < 4 * math.sqrt(s_exp * (1 - s_exp) / 40000)


def test_poisson_table():
    tables = DetectionTables((0.6, 0.2, 0.0), (0.5, 0.4, 0.1), ChannelConfig(10.0, 1e-5, 0.02))
    k = 3
    expected = sum(math.exp(-0.6) * 0.6**j / math.factorial(j) for j in range(k + 1))
    assert tables.poisson_cdf[0, k] == pytest.approx(expected, rel=1e-13)
    assert np.all(tables.poisson_cdf[2] == 1.0)
    assert np.all(np.diff(tables.thresholds, axis=1) >= 0)
    assert tables.class_cdf == pytest.approx([0.5, 0.9])


@pytest.mark.skipif(not HAVE_NUMBA, reason="numba unavailable")
def test_kernels_bit_identical():
    params = presets.paper_params()
    tables = DetectionTables(params.intensities, params.class_fractions, ChannelConfig(3.0, 0.01, 0.05))
    rng = np.random.default_rng(0)
    u = rng.random((3, 200_000))
    out = {}
    for name, k in (("numba", NUMBA_KERNELS), ("numpy", NUMPY_KERNELS)):
        cls = k["classify"](u[0], tables.class_cdf)
        det = k["detect"](cls, u[1], u[2], tables.poisson_cdf, tables.thresholds)
        out[name] = (cls, det, k["tally"](cls, det, 3))
    for a, b in zip(out["numba"], out["numpy"]):
        np.testing.assert_array_equal(a, b)
    assert out["numpy"][2].sum() == 200_000


def test_disable_flag_selects_numpy_and_matches():
    code = (
        "import json; from decoyqkd._accel import BACKEND; from decoyqkd import presets;"
        "from decoyqkd.simulation import simulate_batch;"
        "s = simulate_batch(300000, presets.paper_params(), presets.channel_75km().with_attenuation(10.0), 9);"
        "print(json.dumps([BACKEND, s.to_dict()]))"
    )
    env = {**os.environ, "DECOYQKD_DISABLE_NUMBA": "1"}
    res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    backend, stats = json.loads(res.stdout)
    assert backend == "numpy"
    here = simulate_batch(300000, presets.paper_params(), presets.channel_75km().with_attenuation(10.0), 9)
    assert stats == here.to_dict()


def test_batch_deterministic_and_seed_sensitive():
    params, ch = presets.paper_params(), ChannelConfig(10.0, 1e-4, 0.02)
    a = simulate_batch(500_000, params, ch, seed=3)
    assert a == simulate_batch(500_000, params, ch, seed=3)
    assert a != simulate_batch(500_000, params, ch, seed=4)
    assert a.n_signal + a.n_decoy + a.n_vacuum == 500_000


def test_sub_batches_merge_to_full_run():
    params, ch = presets.paper_params(), ChannelConfig(10.0, 1e-4, 0.02)
    full = simulate_tallies(50_000, params, ch, 7, chunk_size=4096)
    parts = [simulate_tallies(50_000, params, ch, 7, chunks=c, chunk_size=4096) for c in ([0, 3, 5], [1, 2], [4, 6, 7, 8, 9, 10, 11, 12])]
    merged = sum(parts, BatchTally.empty())
    np.testing.assert_array_equal(merged.counts, full.counts)


def test_worker_count_does_not_change_result():
    params, ch = presets.paper_params(), ChannelConfig(10.0, 1e-4, 0.02)
    one = simulate_tallies(40_000, params, ch, 2, chunk_size=10_000)
    two = simulate_tallies(40_000, params, ch, 2, workers=2, chunk_size=10_000)
    np.testing.assert_array_equal(one.counts, two.counts)


def test_empty_classes_flagged():
    stats = simulate_batch(0, presets.paper_params(), ChannelConfig(10.0), seed=0)
    assert {"empty_signal", "empty_decoy", "empty_vacuum"} <= set(stats.flags)
    assert stats.s_signal == 0.0
    with pytest.raises(ValueError):
        simulate_batch(-1, presets.paper_params(), ChannelConfig(10.0), seed=0)


def within_standard_errors(stats, expected, k=4.0):
    for cls in ("signal", "decoy", "vacuum"):
        n, s, s_exp = stats.count(cls), stats.rate(cls), expected.rate(cls)
        assert abs(s - s_exp) <= k * math.sqrt(s_exp * (1 - s_exp) / n), cls
    for cls in ("signal", "decoy"):
        clicks = stats.count(cls) * stats.rate(cls)
        e, e_exp = getattr(stats, f"e_{cls}"), getattr(expected, f"e_{cls}")
        assert abs(e - e_exp) <= k * math.sqrt(e_exp * (1 - e_exp) / clicks), cls


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_monte_carlo_matches_expectation(seed):
    params = presets.paper_params()
    ch = ChannelConfig(20.0, 1e-4, 0.02)
    within_standard_errors(simulate_batch(2_000_000, params, ch, seed), expected_statistics(ch, params))


@given(st.floats(0, 40), st.floats(0, 1e-3), st.floats(0, 0.2))
def test_expected_rates_are_probabilities(db, y0, ed):
    s, e = expected_rates(ChannelConfig(db, y0, ed), 0.6)
    assert 0 <= s <= 1 and 0 <= e <= 0.5 + 1e-12


def test_distance_sweep_rows():
    rows = distance_sweep(presets.paper_params(), presets.channel_75km(), PAPER_ATTENUATIONS_DB)
    assert [r.attenuation_db for r in rows] == list(PAPER_ATTENUATIONS_DB)
    theory = [r.rate_theory for r in rows]
    assert all(a > b for a, b in zip(theory, theory[1:]))
    worst = [r.rate_worstcase for r in rows]
    assert all(a >= b for a, b in zip(worst, worst[1:]))
    assert rows[2].rate_theory == pytest.approx(4.3e-5, rel=0.02)
    with pytest.raises(ValueError):
        distance_sweep(presets.paper_params(), presets.channel_75km(), [])


def test_reference_settings_sweep_strictly_decreasing():
    rows = [r for _, p, ch in presets.sweep_settings() for r in distance_sweep(p, ch, [ch.total_attenuation_db])]
    for col in ("rate_theory", "rate_worstcase"):
        vals = [getattr(r, col) for r in rows]
        assert all(a > b > 0 for a, b in zip(vals, vals[1:])), col


def test_sweep_worst_case_approaches_theory_without_fluctuations():
    ch = presets.channel_75km()
    gaps = []
    for u, n in ((10.0, 10**10), (1.0, 10**12), (1e-3, 10**15)):
        p = ProtocolParameters(n_total=n, confidence_multiplier=u)
        (row,) = distance_sweep(p, ch, [30.0])
        assert row.rate_worstcase <= row.rate_theory
        gaps.append(row.rate_theory - row.rate_worstcase)
    assert gaps[0] > gaps[1] > gaps[2]
