"""Command-line entry point: ``decoyqkd <command> [options]``.

Every command builds a :class:`RunConfig` from an optional JSON config file
plus flags, runs to completion in memory, and only then prints its result and
writes it under ``--out``. Failures therefore never leave partial output.

Exit codes: 0 success, 1 runtime error, 2 invalid input.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from . import presets
from .analysis import ObservedStatistics, ProtocolParameters, analyze, economic_s0_scan, worst_case_decoy_rate
from .errors import AnalysisError, DecoyQKDError, DegenerateIntensities, NotConverged, ValidationError
from .polarization import DEFAULT_TARGET, CompensatorState, FiberTransform, run_apc
from .protocol.session import DEFAULT_DISCLOSURE, run_session
from .simulation import PAPER_ATTENUATIONS_DB, ChannelConfig, distance_sweep, simulate_batch

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2
FORMATS = ("json", "csv", "table")
_TOP_LEVEL_KEYS = {"description", "params", "channel", "statistics", "tabulated",
                   "session", "scan", "sweep", "apc", "seed"}
_SECTION_KEYS = {
    "session": {"n_pulses", "disclosure_fraction", "workers"},
    "scan": {"r0_max", "grid_points"},
    "sweep": {"attenuations_db"},
    "apc": {"target", "max_iterations"},
}


def bundled_path(name: str) -> Path | None:
    """Path of a data file shipped with the package, accepting a bare stem."""
    root = resources.files("decoyqkd") / "data"
    for candidate in (name, f"{name}.json"):
        p = root / candidate
        if p.is_file():
            return Path(str(p))
    return None


def bundled_files() -> list[str]:
    root = resources.files("decoyqkd") / "data"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".json"))


def load_document(path: str, what: str) -> dict:
    """Read a JSON object from ``path`` or from the bundled data directory."""
    p = Path(path)
    if not p.is_file():
        p = bundled_path(path) or p
    try:
        doc = json.loads(p.read_text())
    except FileNotFoundError:
        raise ValidationError({what: f"no such file: {path}"}) from None
    except (OSError, UnicodeDecodeError) as exc:
        raise ValidationError({what: f"cannot read {path}: {exc}"}) from exc
    except json.JSONDecodeError as exc:
        raise ValidationError({what: f"{path} is not valid JSON: {exc}"}) from exc
    if not isinstance(doc, dict):
        raise ValidationError({what: f"{path} must hold a JSON object"})
    return doc


def _prefixed(prefix: str, build: Callable, problems: dict):
    try:
        return build()
    except ValidationError as exc:
        problems.update({f"{prefix}.{k}": v for k, v in exc.problems.items()})
    except DegenerateIntensities as exc:
        problems[f"{prefix}.mu"] = str(exc)
    except TypeError as exc:
        problems[prefix] = str(exc)
    return None


def _channel_from(spec) -> ChannelConfig:
    if isinstance(spec, str):
        if spec not in presets.CHANNELS:
            raise ValidationError({"preset": f"unknown channel {spec!r}; choose from {sorted(presets.CHANNELS)}"})
        return presets.CHANNELS[spec]()
    if not isinstance(spec, dict):
        raise ValidationError({"<section>": "expected a preset name or an object"})
    return ChannelConfig.from_dict(spec)


@dataclass(frozen=True)
class RunConfig:
    """Everything one command needs, validated up front."""

    params: ProtocolParameters = field(default_factory=presets.paper_params)
    # None selects each command's default link
    channel: ChannelConfig | None = None
    statistics: ObservedStatistics | None = None
    seed: int = 0
    n_pulses: int = 10_000_000
    disclosure_fraction: float = DEFAULT_DISCLOSURE
    workers: int = 1
    r0_max: float | None = None
    grid_points: int = 201
    attenuations_db: tuple[float, ...] | None = None
    apc_target: float = DEFAULT_TARGET
    apc_max_iterations: int = 500
    out_dir: Path | None = None

    @classmethod
    def from_dict(cls, doc: dict, overrides: dict | None = None) -> "RunConfig":
        """Build from a config document; ``overrides`` come from flags and win."""
        problems: dict[str, str] = {}
        for key in sorted(set(doc) - _TOP_LEVEL_KEYS):
            problems[key] = "unknown field"
        kw: dict = {}
        for section, allowed in _SECTION_KEYS.items():
            sec = doc.get(section, {})
            if not isinstance(sec, dict):
                problems[section] = "expected an object"
                continue
            for key in sorted(set(sec) - allowed):
                problems[f"{section}.{key}"] = "unknown field"
        sec = {s: doc.get(s, {}) if isinstance(doc.get(s, {}), dict) else {} for s in _SECTION_KEYS}
        kw.update({k: v for k, v in sec["session"].items()})
        kw.update({k: v for k, v in sec["scan"].items()})
        if "attenuations_db" in sec["sweep"]:
            kw["attenuations_db"] = sec["sweep"]["attenuations_db"]
        if "target" in sec["apc"]:
            kw["apc_target"] = sec["apc"]["target"]
        if "max_iterations" in sec["apc"]:
            kw["apc_max_iterations"] = sec["apc"]["max_iterations"]
        if "seed" in doc:
            kw["seed"] = doc["seed"]
        kw.update({k: v for k, v in (overrides or {}).items() if v is not None})

        params_doc = doc.get("params")
        params = presets.paper_params()
        if params_doc is not None:
            if not isinstance(params_doc, dict):
                problems["params"] = "expected an object"
            else:
                merged = {**presets.paper_params().to_dict(), **params_doc}
                params = _prefixed("params", lambda: ProtocolParameters.from_dict(merged), problems)
        channel_spec = kw.pop("channel", None) or doc.get("channel")
        channel = None
        if channel_spec is not None:
            channel = _prefixed("channel", lambda: _channel_from(channel_spec), problems)

        statistics = None
        stats_doc = doc.get("statistics")
        if stats_doc is not None and params is not None:
            statistics = _prefixed("statistics", lambda: ObservedStatistics.from_dict(stats_doc, params), problems)

        problems.update(_check_options(kw))
        out_dir = kw.get("out_dir")
        if out_dir is not None:
            problem = _check_writable(Path(out_dir))
            if problem:
                problems["out"] = problem
        if problems:
            raise ValidationError(problems)
        if "attenuations_db" in kw:
            kw["attenuations_db"] = tuple(float(x) for x in kw["attenuations_db"])
        if out_dir is not None:
            kw["out_dir"] = Path(out_dir)
        return cls(params=params, channel=channel, statistics=statistics, **kw)

    @property
    def link(self) -> ChannelConfig:
        return self.channel if self.channel is not None else presets.channel_75km()


def _is_int(v) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float, np.number)) and not isinstance(v, bool)


def _check_options(kw: dict) -> dict[str, str]:
    p: dict[str, str] = {}
    if "seed" in kw and not (_is_int(kw["seed"]) and kw["seed"] >= 0):
        p["seed"] = "must be a non-negative integer"
    if "n_pulses" in kw and not (_is_int(kw["n_pulses"]) and kw["n_pulses"] > 0):
        p["session.n_pulses"] = "must be a positive integer"
    if "workers" in kw and not (_is_int(kw["workers"]) and kw["workers"] >= 1):
        p["session.workers"] = "must be an integer >= 1"
    if "disclosure_fraction" in kw:
        f = kw["disclosure_fraction"]
        if not (_is_num(f) and 0 < f < 1):
            p["session.disclosure_fraction"] = "must lie in (0, 1)"
    if kw.get("r0_max") is not None and not (_is_num(kw["r0_max"]) and kw["r0_max"] > 0):
        p["scan.r0_max"] = "must be > 0"
    if "grid_points" in kw and not (_is_int(kw["grid_points"]) and kw["grid_points"] >= 2):
        p["scan.grid_points"] = "must be an integer >= 2"
    if "attenuations_db" in kw:
        a = kw["attenuations_db"]
        if not (isinstance(a, (list, tuple)) and a and all(_is_num(x) and x >= 0 for x in a)):
            p["sweep.attenuations_db"] = "must be a non-empty list of non-negative numbers"
    if "apc_target" in kw and not (_is_num(kw["apc_target"]) and 0.5 < kw["apc_target"] <= 1):
        p["apc.target"] = "must lie in (0.5, 1]"
    if "apc_max_iterations" in kw and not (_is_int(kw["apc_max_iterations"]) and kw["apc_max_iterations"] >= 1):
        p["apc.max_iterations"] = "must be an integer >= 1"
    return p


def _check_writable(path: Path) -> str | None:
    # checked without creating anything; the directory is made at write time
    probe = path.absolute()
    while not probe.exists():
        probe = probe.parent
    if not probe.is_dir():
        return f"{probe} is not a directory"
    if not os.access(probe, os.W_OK | os.X_OK):
        return f"{probe} is not writable"
    return None


@dataclass
class CommandOutput:
    """Result of one command in every renderable form.

    ``document`` is the JSON form, ``columns``/``rows`` the CSV form and
    ``summary`` the human-readable key/value table (if it differs from the
    rows). ``percent`` names the fields shown as percentages in tables.
    """

    stem: str
    file_format: str
    document: object
    columns: tuple[str, ...] = ()
    rows: list[tuple] = field(default_factory=list)
    summary: list[tuple[str, object]] | None = None
    percent: frozenset[str] = frozenset()


def _fmt(value, as_percent: bool) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, (int, np.integer)):
        return str(value)
    if isinstance(value, float):
        return f"{100 * value:.3f}%" if as_percent else f"{value:.4g}"
    return str(value)


def render(output: CommandOutput, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(output.document, indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if output.columns:
            writer.writerow(output.columns)
            writer.writerows(output.rows)
        else:
            writer.writerow(("field", "value"))
            writer.writerows(_flatten(output.document))
        return buf.getvalue()
    if output.summary is not None:
        rows = [(k, _fmt(v, k in output.percent)) for k, v in output.summary]
        width = max(len(k) for k, _ in rows)
        return "".join(f"{k:<{width}}  {v}\n" for k, v in rows)
    header = list(output.columns)
    body = [[_fmt(v, c in output.percent) for c, v in zip(header, row)] for row in output.rows]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(h.rjust(w) for h, w in zip(r, widths)) for r in [header, *body]]
    return "\n".join(lines) + "\n"


def _flatten(doc, prefix: str = "") -> list[tuple[str, object]]:
    out = []
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.extend(_flatten(v, key + "."))
        elif isinstance(v, (list, tuple)):
            out.append((key, ";".join(map(str, v))))
        else:
            out.append((key, v))
    return out


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cmd_analyze(config: RunConfig) -> CommandOutput:
    if config.statistics is None:
        raise ValidationError({"statistics": "no observed statistics given"})
    est = analyze(config.params, config.statistics)
    summary = [
        ("s1_prime", est.s1_prime),
        ("delta1_signal", est.delta1_signal),
        ("e1_signal", est.e1_signal),
        ("rate_signal_per_pulse", est.rate_signal_per_pulse),
        ("rate_decoy_per_pulse", est.rate_decoy_per_pulse),
        ("rate_theory_per_pulse", est.rate_theory_per_pulse),
        ("efficiency_ratio", est.efficiency_ratio),
        ("rate_signal_hz", est.rate_signal_hz),
        ("rate_theory_hz", est.rate_theory_hz),
        ("secure_signal", est.secure_signal),
    ]
    if est.flags:
        summary.append(("flags", ",".join(est.flags)))
    return CommandOutput("analyze", "json", est.to_dict(), summary=summary,
                         percent=frozenset({"e1_signal", "delta1_signal"}))


def _stats_summary(stats: ObservedStatistics) -> tuple[tuple[str, ...], list[tuple]]:
    cols = ("class", "pulses", "counting_rate", "qber")
    rows = [
        ("signal", stats.n_signal, stats.s_signal, stats.e_signal),
        ("decoy", stats.n_decoy, stats.s_decoy, stats.e_decoy),
        ("vacuum", stats.n_vacuum, stats.s_vacuum, None),
    ]
    return cols, rows


def cmd_simulate(config: RunConfig) -> CommandOutput:
    stats = simulate_batch(config.n_pulses, config.params, config.link, config.seed, workers=config.workers)
    cols, rows = _stats_summary(stats)
    return CommandOutput("simulate", "json", stats.to_dict(), cols, rows, percent=frozenset({"qber"}))


def cmd_session(config: RunConfig) -> CommandOutput:
    report = run_session(config.n_pulses, config.params, config.link, config.seed,
                         disclosure_fraction=config.disclosure_fraction)
    summary = [
        ("n_pulses", report.n_pulses),
        ("seed", report.seed),
        ("sifted_signal", report.sifted["signal"]),
        ("sifted_decoy", report.sifted["decoy"]),
        ("test_bits", report.test_bits),
        ("key_bits", report.key_bits),
        ("key_errors", report.key_errors),
        ("secure", report.secure),
        ("secure_key_bits", report.secure_key_bits),
    ]
    if report.statistics is not None:
        summary += [("e_signal", report.statistics.e_signal), ("e_decoy", report.statistics.e_decoy)]
    if report.estimate is not None:
        summary += [("e1_signal", report.estimate.e1_signal),
                    ("rate_signal_per_pulse", report.estimate.rate_signal_per_pulse)]
    if report.failure:
        summary.append(("failure", report.failure))
    return CommandOutput("session", "json", report.to_dict(), summary=summary,
                         percent=frozenset({"e_signal", "e_decoy", "e1_signal"}))


def _statistics_or_expected(config: RunConfig) -> ObservedStatistics:
    if config.statistics is not None:
        return config.statistics
    from .simulation import expected_statistics

    return expected_statistics(config.link, config.params)


def cmd_scan_s0(config: RunConfig) -> CommandOutput:
    stats = _statistics_or_expected(config)
    scan = economic_s0_scan(config.params, stats, config.r0_max, config.grid_points)
    worst = worst_case_decoy_rate(config.params, stats)
    doc = {
        "min_rate": scan.min_rate,
        "argmin_r0": scan.argmin_r0,
        "worst_case_rate": worst,
        "curve": [{"r0": r0, "rate_per_pulse": rate} for r0, rate in scan.curve],
    }
    return CommandOutput("scan_s0", "csv", doc, ("r0", "rate_per_pulse"), list(scan.curve),
                         percent=frozenset({"r0"}))


def cmd_sweep(config: RunConfig) -> CommandOutput:
    if config.channel is None and config.attenuations_db is None:
        rows = [row for _, params, channel in presets.sweep_settings()
                for row in distance_sweep(params, channel, [channel.total_attenuation_db])]
    else:
        rows = distance_sweep(config.params, config.link, config.attenuations_db or PAPER_ATTENUATIONS_DB)
    doc = [r._asdict() for r in rows]
    return CommandOutput("sweep", "csv", doc, ("attenuation_db", "rate_theory", "rate_worstcase"),
                         [tuple(r) for r in rows])


def cmd_apc(config: RunConfig) -> CommandOutput:
    rng = np.random.default_rng(config.seed)
    fiber = FiberTransform.random(rng)
    run = run_apc(fiber, CompensatorState(), config.apc_target, config.apc_max_iterations, randomness=rng)
    rows = [tuple(r) for r in run.trace]
    doc = {"converged": run.converged, "angles": list(run.compensator.angles),
           "trace": [r._asdict() for r in run.trace]}
    return CommandOutput("apc", "csv", doc, ("iteration", "v_h", "v_plus"), rows,
                         percent=frozenset({"v_h", "v_plus"}))


COMMANDS: dict[str, tuple[Callable[[RunConfig], CommandOutput], str]] = {
    "analyze": (cmd_analyze, "table"),
    "simulate": (cmd_simulate, "json"),
    "session": (cmd_session, "json"),
    "scan-s0": (cmd_scan_s0, "csv"),
    "sweep": (cmd_sweep, "csv"),
    "apc": (cmd_apc, "csv"),
}


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config file (or bundled name)")
    common.add_argument("--seed", type=int, help="RNG seed; identical seeds give identical output")
    common.add_argument("--out", metavar="DIR", help="also write the result to DIR")
    common.add_argument("--format", choices=FORMATS, help="stdout format (default depends on command)")

    parser = argparse.ArgumentParser(prog="decoyqkd", description="Decoy-state BB84 key-rate toolkit.")
    parser.add_argument("--list-data", action="store_true", help="list bundled data files and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("analyze", parents=[common], help="key-rate analysis of observed statistics")
    p.add_argument("stats_file", help="statistics JSON (path or bundled name, e.g. table1_75km)")

    for name, text in (("simulate", "Monte Carlo counting rates and QBERs"),
                       ("session", "full simulated protocol session")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--pulses", type=int, dest="n_pulses", help="number of pulses Alice sends")
        p.add_argument("--channel", help=f"channel preset {sorted(presets.CHANNELS)}")
        if name == "simulate":
            p.add_argument("--workers", type=int, help="worker processes")
        else:
            p.add_argument("--disclosure", type=float, dest="disclosure_fraction",
                           help="fraction of sifted signal bits disclosed")

    p = sub.add_parser("scan-s0", parents=[common], help="decoy key rate versus assumed vacuum rate")
    p.add_argument("--r0-max", type=float, dest="r0_max", help="half-width of the relative s0 grid")
    p.add_argument("--grid-points", type=int, dest="grid_points")
    p.add_argument("--channel", help="channel preset used when the config has no statistics")

    p = sub.add_parser("sweep", parents=[common], help="expected key rates over link losses")
    p.add_argument("--attenuations", type=_float_list, dest="attenuations_db",
                   help="comma-separated total attenuations in dB")
    p.add_argument("--channel", help="channel preset supplying dark counts and misalignment")

    p = sub.add_parser("apc", parents=[common], help="polarization compensation on a random fiber")
    p.add_argument("--target", type=float, dest="apc_target")
    p.add_argument("--max-iterations", type=int, dest="apc_max_iterations")
    return parser


def _config_for(args: argparse.Namespace) -> RunConfig:
    doc: dict = {}
    if args.config:
        doc = load_document(args.config, "config")
    if args.command == "analyze":
        stats_doc = load_document(args.stats_file, "stats_file")
        if "statistics" in stats_doc:
            doc = {**doc, **stats_doc}
        else:
            doc = {**doc, "statistics": stats_doc}
    skip = {"command", "config", "format", "out", "list_data", "stats_file"}
    overrides = {k: v for k, v in vars(args).items() if k not in skip}
    overrides["out_dir"] = args.out
    return RunConfig.from_dict(doc, overrides)


def _report_invalid(exc: ValidationError, stream) -> None:
    print("error: invalid input", file=stream)
    for key, msg in exc.problems.items():
        print(f"  {key}: {msg}", file=stream)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.list_data:
        print("\n".join(bundled_files()))
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    command, default_format = COMMANDS[args.command]
    try:
        config = _config_for(args)
        output = command(config)
        text = render(output, args.format or default_format)
        if config.out_dir is not None:
            machine = render(output, output.file_format)
            _write_atomic(config.out_dir / f"{output.stem}.{output.file_format}", machine)
    except ValidationError as exc:
        _report_invalid(exc, sys.stderr)
        return EXIT_INVALID
    except DegenerateIntensities as exc:
        print(f"error: invalid input\n  params.mu: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except AnalysisError as exc:
        print(f"error: analysis failed {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except NotConverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (DecoyQKDError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    sys.stdout.write(text)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
