import csv
import io
import json
import shutil
import subprocess

import pytest

from decoyqkd.analysis import ObservedStatistics, SecurityEstimate, worst_case_decoy_rate
from decoyqkd.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, RunConfig, main
from decoyqkd.protocol import SessionReport

from .conftest import load_fixture


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.reader(io.StringIO(text)))


def test_analyze_bundled_tables(capsys):
    code, out, _ = run(capsys, "analyze", "table1_75km")
    assert code == EXIT_OK
    fields = dict(line.split(None, 1) for line in out.strip().splitlines())
    assert fields["e1_signal"].strip().endswith("%")
    assert float(fields["rate_signal_per_pulse"]) > 0
    code, out, _ = run(capsys, "analyze", "table1_102km.json", "--format", "json")
    est = SecurityEstimate.from_dict(json.loads(out))
    assert est.secure_signal and 0 < est.e1_signal < 0.5


def test_analyze_csv_and_out_dir(capsys, tmp_path):
    code, out, _ = run(capsys, "analyze", "table1_75km", "--format", "csv", "--out", str(tmp_path / "res"))
    assert code == EXIT_OK and rows(out)[0] == ["field", "value"]
    saved = json.loads((tmp_path / "res" / "analyze.json").read_text())
    # fractions, not percentages, in files
    assert 0 < saved["e1_signal"] < 0.2


@pytest.mark.parametrize("content, field", [
    ("{not json", "stats_file"),
    ('{"s_signal": 2e-4}', "statistics.s_decoy"),
    ('{"params": {"mu": 0.6}, "statistics": {"s_signal": 2e-4, "s_decoy": 7e-5, "s_vacuum": 9e-6,'
     ' "e_signal": 0.03, "e_decoy": 0.09}}', "params.mu"),
    ('{"statistics": {"s_signal": 2.0, "s_decoy": 7e-5, "s_vacuum": 9e-6, "e_signal": 0.03, "e_decoy": 0.09}}',
     "statistics.s_signal"),
    ('[1, 2]', "stats_file"),
])
def test_invalid_input_exits_2_without_output(capsys, tmp_path, content, field):
    bad = tmp_path / "bad.json"
    bad.write_text(content)
    out_dir = tmp_path / "out"
    code, out, err = run(capsys, "analyze", str(bad), "--out", str(out_dir))
    assert code == EXIT_INVALID
    assert out == ""
    assert field in err
    assert not out_dir.exists()


def test_missing_file_and_bad_flags(capsys):
    assert run(capsys, "analyze", "no_such_file.json")[0] == EXIT_INVALID
    code, _, err = run(capsys, "sweep", "--channel", "mars")
    assert code == EXIT_INVALID and "channel" in err
    assert run(capsys, "simulate", "--pulses", "0")[0] == EXIT_INVALID
    assert run(capsys, "session", "--disclosure", "1.5")[0] == EXIT_INVALID
    assert run(capsys)[0] == EXIT_INVALID


def test_runtime_failure_exits_1(capsys, tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps({"params": {"n_total": 1000000},
                               "statistics": {"s_signal": 2e-4, "s_decoy": 7.5e-5, "s_vacuum": 0.0,
                                              "e_signal": 0.03, "e_decoy": 0.09}}))
    code, out, err = run(capsys, "analyze", str(cfg), "--out", str(tmp_path / "o"))
    assert code == EXIT_RUNTIME and out == ""
    assert "[single_photon_bound]" in err
    assert not (tmp_path / "o").exists()


def test_sweep_default_four_rows_decreasing(capsys):
    code, out, _ = run(capsys, "sweep")
    table = rows(out)
    assert code == EXIT_OK and table[0] == ["attenuation_db", "rate_theory", "rate_worstcase"]
    body = [[float(x) for x in r] for r in table[1:]]
    assert [r[0] for r in body] == [24.9, 32.2, 34.8, 37.0]
    for col in (1, 2):
        assert all(a[col] > b[col] > 0 for a, b in zip(body, body[1:]))


def test_sweep_custom_attenuations(capsys):
    code, out, _ = run(capsys, "sweep", "--attenuations", "20,25", "--channel", "75km")
    assert code == EXIT_OK and len(rows(out)) == 3


def test_scan_s0_on_13km_config(capsys, tmp_path):
    code, out, _ = run(capsys, "scan-s0", "--config", "fig3_13km", "--out", str(tmp_path))
    assert code == EXIT_OK
    table = rows(out)
    assert table[0] == ["r0", "rate_per_pulse"] and len(table) == 202
    assert (tmp_path / "scan_s0.csv").read_text() == out
    params, stats, doc = load_fixture("fig3_13km.json")
    r0_max = max(abs(float(r[0])) for r in table[1:])
    assert r0_max == pytest.approx(doc["scan"]["r0_max"])
    assert min(float(r[1]) for r in table[1:]) >= worst_case_decoy_rate(params, stats)


def test_simulate_round_trips_into_analyze(capsys, tmp_path):
    code, out, _ = run(capsys, "simulate", "--pulses", "2000000", "--seed", "3", "--out", str(tmp_path))
    assert code == EXIT_OK
    stats = ObservedStatistics.from_dict(json.loads(out))
    assert stats.n_signal + stats.n_decoy + stats.n_vacuum == 2_000_000
    assert ObservedStatistics.from_dict(json.loads((tmp_path / "simulate.json").read_text())) == stats
    code, out, _ = run(capsys, "simulate", "--pulses", "2000000", "--seed", "3", "--format", "table")
    assert "%" in out


def test_session_same_seed_identical_files(capsys, tmp_path):
    args = ["session", "--pulses", "1000000", "--seed", "5", "--channel", "13km"]
    assert run(capsys, *args, "--out", str(tmp_path / "a"))[0] == EXIT_OK
    assert run(capsys, *args, "--out", str(tmp_path / "b"))[0] == EXIT_OK
    a = (tmp_path / "a" / "session.json").read_bytes()
    assert a == (tmp_path / "b" / "session.json").read_bytes()
    SessionReport.from_dict(json.loads(a))


def test_apc_trace(capsys):
    code, out, _ = run(capsys, "apc", "--seed", "2")
    table = rows(out)
    assert code == EXIT_OK and table[0] == ["iteration", "v_h", "v_plus"]
    last = table[-1]
    assert min(float(last[1]), float(last[2])) >= 0.985
    assert run(capsys, "apc", "--seed", "2")[1] == out


def test_apc_not_converged_is_runtime_error(capsys):
    code, out, err = run(capsys, "apc", "--seed", "2", "--max-iterations", "1", "--target", "0.9999999")
    assert code == EXIT_RUNTIME and out == "" and "target" in err


def test_config_file_sections(tmp_path):
    cfg = RunConfig.from_dict({"session": {"n_pulses": 5, "disclosure_fraction": 0.2}, "seed": 4,
                               "channel": "102km", "apc": {"target": 0.99}}, {"seed": 9})
    assert cfg.n_pulses == 5 and cfg.disclosure_fraction == 0.2 and cfg.seed == 9
    assert cfg.link.scheme == "two-detector" and cfg.apc_target == 0.99
    with pytest.raises(ValueError) as exc:
        RunConfig.from_dict({"colour": 1, "scan": {"bins": 3}})
    assert set(exc.value.problems) == {"colour", "scan.bins"}


def test_list_data(capsys):
    code, out, _ = run(capsys, "--list-data")
    assert code == EXIT_OK and "table1_75km.json" in out.split()


@pytest.mark.skipif(shutil.which("decoyqkd") is None, reason="console script not installed")
def test_console_script():
    res = subprocess.run(["decoyqkd", "analyze", "table1_75km"], capture_output=True, text=True)
    assert res.returncode == 0 and "s1_prime" in res.stdout
