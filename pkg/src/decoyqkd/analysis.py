"""Three-intensity decoy-state key-rate analysis.

Everything here is a pure function of its arguments. The pipeline is::

    observed rates -> single-photon yield bound -> single-photon fraction
                   -> single-photon QBER bound  -> secure key per pulse

together with the no-overestimation reference used to judge how much the
finite-size worst-case assumptions cost.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator, Literal, NamedTuple

import numpy as np

from .errors import (
    AnalysisError,
    DegenerateIntensities,
    InconsistentStatistics,
    InsufficientSamples,
    ValidationError,
)

__all__ = [
    "CLASSES",
    "DerivedConstants",
    "KeyRate",
    "ObservedStatistics",
    "ProtocolParameters",
    "QberBound",
    "S0Scan",
    "SecurityEstimate",
    "SinglePhotonBound",
    "TheoryReference",
    "analyze",
    "asymptotic_single_photon_bound",
    "binary_entropy",
    "economic_s0_scan",
    "key_rate_per_pulse",
    "single_photon_fraction",
    "single_photon_qber_upper",
    "solve_single_photon_bound",
    "theoretical_reference",
    "worst_case_decoy_rate",
]

CLASSES = ("signal", "decoy", "vacuum")
PulseClass = Literal["signal", "decoy"]

BISECTION_RTOL = 1e-10
BISECTION_MAX_ITER = 200
_PROBE_POINTS = 65
_FALLBACK_POINTS = 10_000
_LOWER_BRACKET = 1e-12  # fraction of the upper bracket


@dataclass(frozen=True)
class ProtocolParameters:
    """Source settings shared by Alice and the analysis.

    ``class_mix`` is the relative number of signal, decoy and vacuum pulses.
    ``confidence_multiplier`` is the number of standard deviations used in
    every finite-size correction.
    """

    mu: float = 0.2
    mu_prime: float = 0.6
    class_mix: tuple[float, float, float] = (5.0, 4.0, 1.0)
    n_total: int = 0
    pulse_rate_hz: float = 2.5e6
    confidence_multiplier: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "class_mix", tuple(float(x) for x in self.class_mix))
        problems = {}
        if self.mu == self.mu_prime:
            raise DegenerateIntensities("decoy and signal intensities are equal")
        if not 0 < self.mu < self.mu_prime:
            problems["mu"] = "need 0 < mu < mu_prime"
        if len(self.class_mix) != 3 or any(not x > 0 for x in self.class_mix):
            problems["class_mix"] = "need three positive entries"
        if self.n_total < 0:
            problems["n_total"] = "must be >= 0"
        if not self.confidence_multiplier > 0:
            problems["confidence_multiplier"] = "must be > 0"
        if self.pulse_rate_hz < 0:
            problems["pulse_rate_hz"] = "must be >= 0"
        if problems:
            raise ValidationError(problems)

    @property
    def class_fractions(self) -> tuple[float, float, float]:
        total = sum(self.class_mix)
        return tuple(x / total for x in self.class_mix)

    @property
    def intensities(self) -> tuple[float, float, float]:
        return (self.mu_prime, self.mu, 0.0)

    def class_counts(self, n_total: int | None = None) -> tuple[int, int, int]:
        n = self.n_total if n_total is None else n_total
        return tuple(int(round(n * f)) for f in self.class_fractions)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_mix"] = list(self.class_mix)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ProtocolParameters":
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError({k: "unknown field" for k in sorted(unknown)})
        return cls(**doc)


_STAT_FIELDS = (
    "n_signal", "n_decoy", "n_vacuum",
    "s_signal", "s_decoy", "s_vacuum",
    "e_signal", "e_decoy",
)


@dataclass(frozen=True)
class ObservedStatistics:
    """Per-class pulse counts, counting rates and QBERs.

    Rates are clicks per *sent* pulse; QBERs are fractions of sifted bits.
    """

    n_signal: int
    n_decoy: int
    n_vacuum: int
    s_signal: float
    s_decoy: float
    s_vacuum: float
    e_signal: float
    e_decoy: float

    def __post_init__(self):
        problems = {}
        for name in ("n_signal", "n_decoy", "n_vacuum"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float, np.integer, np.floating)) and v >= 0):
                problems[name] = f"count must be a number >= 0, got {v!r}"
        for name in ("s_signal", "s_decoy", "s_vacuum", "e_signal", "e_decoy"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float, np.integer, np.floating)) and 0.0 <= v <= 1.0):
                problems[name] = f"must be a fraction in [0, 1], got {v!r}"
        if problems:
            raise ValidationError(problems)

    @property
    def flags(self) -> tuple[str, ...]:
        """Non-fatal oddities in the data."""
        out = [f"empty_{c}" for c in CLASSES if self.count(c) == 0]
        if not self.s_vacuum <= self.s_decoy <= self.s_signal:
            out.append("rates_not_ordered")
        return tuple(out)

    def rate(self, cls: str) -> float:
        return getattr(self, f"s_{cls}")

    def count(self, cls: str) -> int:
        return getattr(self, f"n_{cls}")

    @classmethod
    def from_params(cls, params: ProtocolParameters, **rates) -> "ObservedStatistics":
        n_s, n_d, n_v = params.class_counts()
        counts = {"n_signal": n_s, "n_decoy": n_d, "n_vacuum": n_v}
        counts.update({k: v for k, v in rates.items() if k.startswith("n_")})
        return cls(**counts, **{k: v for k, v in rates.items() if not k.startswith("n_")})

    def to_dict(self) -> dict:
        return {k: _plain(getattr(self, k)) for k in _STAT_FIELDS}

    @classmethod
    def from_dict(cls, doc: dict, params: ProtocolParameters | None = None) -> "ObservedStatistics":
        if not isinstance(doc, dict):
            raise ValidationError({"<document>": "expected a JSON object"})
        unknown = set(doc) - set(_STAT_FIELDS)
        missing = [k for k in _STAT_FIELDS if k not in doc]
        problems = {k: "unknown field" for k in sorted(unknown)}
        counts_missing = [k for k in missing if k.startswith("n_")]
        if counts_missing and params is None:
            problems.update({k: "missing" for k in counts_missing})
        problems.update({k: "missing" for k in missing if not k.startswith("n_")})
        if problems:
            raise ValidationError(problems)
        if counts_missing:
            return cls.from_params(params, **doc)
        return cls(**doc)

    @classmethod
    def from_json(cls, text: str, params: ProtocolParameters | None = None) -> "ObservedStatistics":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError({"<document>": f"not valid JSON: {exc}"}) from exc
        return cls.from_dict(doc, params)


def _plain(v):
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    return v


@dataclass(frozen=True)
class DerivedConstants:
    """Constants of the photon-number decomposition.

    ``c`` is the multi-photon weight of the decoy state, ``K`` rescales the
    decoy multi-photon part onto the signal state, ``r0`` is the relative
    half-width of the vacuum-rate confidence interval.
    """

    c: float
    K: float
    r0: float

    @classmethod
    def from_inputs(cls, params: ProtocolParameters, stats: ObservedStatistics) -> "DerivedConstants":
        mu, mup = params.mu, params.mu_prime
        c = 1.0 - math.exp(-mu) - mu * math.exp(-mu)
        K = mu**2 * math.exp(-mu) / (mup**2 * math.exp(-mup))
        return cls(c=c, K=K, r0=vacuum_fluctuation(params, stats))


def vacuum_fluctuation(params: ProtocolParameters, stats: ObservedStatistics) -> float:
    s0, n0 = stats.s_vacuum, stats.n_vacuum
    if s0 == 0:
        # (1 +/- r0) * S0 is 0 whatever r0 is
        return 0.0
    if n0 <= 0:
        raise InsufficientSamples("vacuum rate given but no vacuum pulses counted")
    return params.confidence_multiplier / math.sqrt(s0 * n0)


@dataclass(frozen=True)
class SinglePhotonBound:
    s1: float
    s1_prime: float
    s_c: float
    s_c_prime: float
    s0_used: float
    converged: bool = True
    method: str = "bisection"


class QberBound(NamedTuple):
    value: float
    clamped: bool


class KeyRate(NamedTuple):
    rate: float
    secure: bool


class TheoryReference(NamedTuple):
    delta1: float
    e1: float
    rate_per_pulse: float


class S0Scan(NamedTuple):
    min_rate: float
    argmin_r0: float
    curve: list[tuple[float, float]]


def binary_entropy(x: float) -> float:
    """Shannon entropy of a Bernoulli(x) variable, in bits."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"binary entropy needs 0 <= x <= 1, got {x!r}")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


class _BoundProblem:
    """Scalar pieces of the joint constraint system, with s_c eliminated."""

    def __init__(self, params: ProtocolParameters, stats: ObservedStatistics, s0: float):
        self.mu, self.mup = params.mu, params.mu_prime
        self.u = params.confidence_multiplier
        self.n_mu = stats.n_decoy
        self.S = stats.s_decoy
        self.Sp = stats.s_signal
        self.s0 = s0
        self.em = math.exp(-self.mu)
        self.emp = math.exp(-self.mup)
        self.c = 1.0 - self.em - self.mu * self.em
        self.K = self.mu**2 * self.em / (self.mup**2 * self.emp)
        self._s1_coef = self.u * math.exp(self.mu / 2) / math.sqrt(self.mu * self.n_mu)
        self._sc_coef = self.u / math.sqrt(self.n_mu)

    def s1_prime(self, s1: float) -> float:
        if s1 <= 0:
            return 0.0
        return s1 - self._s1_coef * math.sqrt(s1)

    def s_c(self, s1: float) -> float:
        return (self.S - self.em * self.s0 - self.mu * self.em * s1) / self.c

    def s_c_prime(self, sc: float) -> float:
        # correction only defined for a positive yield
        if sc <= 0:
            return sc
        return sc - self._sc_coef * math.sqrt(sc)

    def violation(self, s1: float) -> float:
        # positive: the multi-photon part of the decoy rate is too large to be
        # compatible with the signal rate, so s1 must grow
        scp = self.s_c_prime(self.s_c(s1))
        return self.c * scp - self.K * (self.Sp - self.mup * self.emp * self.s1_prime(s1))


def solve_single_photon_bound(
    params: ProtocolParameters,
    stats: ObservedStatistics,
    s0_assumed: float | None = None,
) -> SinglePhotonBound:
    """Smallest single-photon yield compatible with the decoy constraints.

    The second constraint is solved at equality by bisection on its
    violation, bracketed between ~0 and the yield that would explain every
    decoy click by single photons. ``s0_assumed`` defaults to the pessimistic
    ``(1 + r0) * S0``.
    """
    if s0_assumed is None:
        r0 = vacuum_fluctuation(params, stats)
        s0_assumed = (1.0 + r0) * stats.s_vacuum
    if s0_assumed < 0:
        raise ValueError("s0_assumed must be >= 0")
    if not stats.s_decoy > 0:
        raise InconsistentStatistics("no decoy-class clicks; nothing to bound")
    if stats.n_decoy <= 0:
        raise InsufficientSamples("no decoy pulses counted")

    prob = _BoundProblem(params, stats, s0_assumed)
    hi = stats.s_decoy / (params.mu * prob.em)
    lo = hi * _LOWER_BRACKET

    def result(s1: float, method: str) -> SinglePhotonBound:
        sc = prob.s_c(s1)
        return SinglePhotonBound(
            s1=s1,
            s1_prime=prob.s1_prime(s1),
            s_c=sc,
            s_c_prime=prob.s_c_prime(sc),
            s0_used=s0_assumed,
            method=method,
        )

    if prob.violation(lo) <= 0:
        # constraint already met without single-photon counts
        return result(0.0, "trivial")
    if prob.violation(hi) > 0:
        raise InconsistentStatistics(
            "observed rates admit no feasible single-photon yield in the bracket"
        )

    probe = np.linspace(lo, hi, _PROBE_POINTS)
    signs = np.array([prob.violation(x) > 0 for x in probe])
    if np.count_nonzero(signs[1:] != signs[:-1]) == 1:
        a, b, method = lo, hi, "bisection"
    else:
        grid = np.linspace(lo, hi, _FALLBACK_POINTS)
        feasible = next(i for i, x in enumerate(grid) if prob.violation(x) <= 0)
        a, b, method = grid[feasible - 1], grid[feasible], "grid"

    for _ in range(BISECTION_MAX_ITER):
        if b - a <= BISECTION_RTOL * b:
            break
        m = 0.5 * (a + b)
        if prob.violation(m) > 0:
            a = m
        else:
            b = m
    out = result(b, method)
    converged = b - a <= BISECTION_RTOL * b
    out = SinglePhotonBound(**{**asdict(out), "converged": converged})
    if out.s1_prime < 0 or out.s_c_prime < 0:
        raise InsufficientSamples(
            f"finite-size correction is larger than the bound "
            f"(s1'={out.s1_prime:.3e}, s_c'={out.s_c_prime:.3e}); collect more pulses"
        )
    return out


def asymptotic_single_photon_bound(
    params: ProtocolParameters,
    stats: ObservedStatistics,
    s0_assumed: float | None = None,
) -> float:
    """Closed-form solution of the constraints with no finite-size terms."""
    mu, mup = params.mu, params.mu_prime
    if mu == mup:
        raise DegenerateIntensities("decoy and signal intensities are equal")
    s0 = stats.s_vacuum if s0_assumed is None else s0_assumed
    em, emp = math.exp(-mu), math.exp(-mup)
    K = mu**2 * em / (mup**2 * emp)
    num = stats.s_decoy - em * s0 - K * stats.s_signal
    den = mu * em - K * mup * emp
    return max(0.0, num / den)


def single_photon_fraction(
    bound: SinglePhotonBound,
    params: ProtocolParameters,
    stats: ObservedStatistics,
    cls: PulseClass,
) -> float:
    """Fraction of a class's clicks that came from single-photon pulses.

    The signal class uses the fluctuation-corrected yield, the decoy class
    the uncorrected one.
    """
    if cls == "signal":
        lam, s1, rate = params.mu_prime, bound.s1_prime, stats.s_signal
    elif cls == "decoy":
        lam, s1, rate = params.mu, bound.s1, stats.s_decoy
    else:
        raise ValueError(f"class must be 'signal' or 'decoy', got {cls!r}")
    if rate == 0:
        raise ZeroDivisionError(f"{cls} counting rate is zero")
    return s1 * lam * math.exp(-lam) / rate


def single_photon_qber_upper(
    params: ProtocolParameters,
    stats: ObservedStatistics,
    delta1: float,
    cls: PulseClass,
    s0_assumed: float | None = None,
) -> QberBound:
    """Upper bound on the single-photon error rate of a class.

    Dark counts contribute errors at rate 1/2; their share is subtracted
    before attributing the rest to single photons. ``s0_assumed`` defaults to
    the optimistic-for-Eve ``(1 - r0) * S0``.
    """
    if delta1 == 0:
        raise ZeroDivisionError("single-photon fraction is zero")
    if s0_assumed is None:
        s0_assumed = (1.0 - vacuum_fluctuation(params, stats)) * stats.s_vacuum
    if cls == "signal":
        lam, rate, qber = params.mu_prime, stats.s_signal, stats.e_signal
    elif cls == "decoy":
        lam, rate, qber = params.mu, stats.s_decoy, stats.e_decoy
    else:
        raise ValueError(f"class must be 'signal' or 'decoy', got {cls!r}")
    if rate == 0:
        raise ZeroDivisionError(f"{cls} counting rate is zero")
    e1 = (qber - s0_assumed * math.exp(-lam) / (2.0 * rate)) / delta1
    if e1 < 0.0:
        return QberBound(0.0, True)
    if e1 > 1.0:
        return QberBound(1.0, True)
    return QberBound(e1, False)


def key_rate_per_pulse(s_class: float, delta1: float, e_class: float, e1: float) -> KeyRate:
    """Secure key per sent pulse, clamped at zero."""
    if not 0.0 <= delta1 <= 1.0:
        raise ValueError(f"delta1 must lie in [0, 1], got {delta1!r}")
    if s_class < 0:
        raise ValueError("counting rate must be >= 0")
    raw = s_class * (delta1 - binary_entropy(e_class) - delta1 * binary_entropy(e1))
    if raw > 0:
        return KeyRate(raw, True)
    return KeyRate(0.0, False)


def theoretical_reference(params: ProtocolParameters, stats: ObservedStatistics) -> TheoryReference:
    """Key rate if the single-photon fraction and QBER were known exactly.

    Assumes the linear yield model ``S(mu') = eta * mu' + S0``, under which
    the single-photon yield is ``eta + S0``.
    """
    mup, Sp, S0 = params.mu_prime, stats.s_signal, stats.s_vacuum
    if not Sp > S0:
        raise InconsistentStatistics("signal rate does not exceed the vacuum rate")
    emp = math.exp(-mup)
    delta1 = (Sp - (1.0 - mup) * S0) * emp / Sp
    e1 = (stats.e_signal - S0 * emp / (2.0 * Sp)) / delta1
    e1 = min(max(e1, 0.0), 1.0)
    rate = key_rate_per_pulse(Sp, min(delta1, 1.0), stats.e_signal, e1).rate
    return TheoryReference(delta1, e1, rate)


def _decoy_rate(params: ProtocolParameters, stats: ObservedStatistics, s0_bound: float, s0_qber: float) -> float:
    bound = solve_single_photon_bound(params, stats, s0_bound)
    delta1 = single_photon_fraction(bound, params, stats, "decoy")
    if delta1 == 0:
        return 0.0
    e1 = single_photon_qber_upper(params, stats, delta1, "decoy", s0_qber).value
    return key_rate_per_pulse(stats.s_decoy, min(delta1, 1.0), stats.e_decoy, e1).rate


def worst_case_decoy_rate(params: ProtocolParameters, stats: ObservedStatistics) -> float:
    """Decoy-class key rate with the two separate worst-case vacuum rates."""
    r0 = vacuum_fluctuation(params, stats)
    S0 = stats.s_vacuum
    return _decoy_rate(params, stats, (1.0 + r0) * S0, (1.0 - r0) * S0)


def economic_s0_scan(
    params: ProtocolParameters,
    stats: ObservedStatistics,
    r0_max: float | None = None,
    grid_points: int = 201,
) -> S0Scan:
    """Decoy key rate as one consistent vacuum rate sweeps its interval.

    The true vacuum yield is unknown but single-valued, so the same
    ``s0 = (1 + r0) * S0`` enters both the yield bound and the QBER bound.
    The secure rate is the minimum over the grid. ``r0_max`` defaults to the
    statistical half-width.
    """
    if grid_points < 2:
        raise ValueError("grid_points must be >= 2")
    if r0_max is None:
        r0_max = vacuum_fluctuation(params, stats)
    if r0_max < 0:
        raise ValueError("r0_max must be >= 0")
    curve = []
    for r0 in np.linspace(-r0_max, r0_max, grid_points):
        s0 = max(0.0, (1.0 + r0) * stats.s_vacuum)
        try:
            rate = _decoy_rate(params, stats, s0, s0)
        except (AnalysisError, ZeroDivisionError):
            rate = 0.0
        curve.append((float(r0), rate))
    i = min(range(len(curve)), key=lambda k: curve[k][1])
    return S0Scan(curve[i][1], curve[i][0], curve)


@dataclass(frozen=True)
class SecurityEstimate:
    delta1_signal: float
    delta1_decoy: float
    e1_signal: float
    e1_decoy: float
    rate_signal_per_pulse: float
    rate_decoy_per_pulse: float
    delta1_theory: float
    e1_theory: float
    rate_theory_per_pulse: float
    efficiency_ratio: float
    s1: float
    s1_prime: float
    r0: float
    secure_signal: bool
    secure_decoy: bool
    # per-pulse rate * repetition rate * signal share; the duty cycle of the
    # real link is not modelled
    rate_signal_hz: float
    rate_theory_hz: float
    flags: tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flags"] = list(self.flags)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "SecurityEstimate":
        doc = dict(doc)
        doc["flags"] = tuple(doc.get("flags", ()))
        return cls(**doc)


@contextmanager
def _stage(name: str) -> Iterator[None]:
    try:
        yield
    except AnalysisError as exc:
        if exc.stage is None:
            exc.stage = name
        raise


def analyze(params: ProtocolParameters, stats: ObservedStatistics) -> SecurityEstimate:
    """Full two-step worst-case analysis for both classes plus the reference."""
    flags = list(stats.flags)
    with _stage("vacuum_fluctuation"):
        r0 = vacuum_fluctuation(params, stats)
    S0 = stats.s_vacuum
    with _stage("single_photon_bound"):
        bound = solve_single_photon_bound(params, stats, (1.0 + r0) * S0)

    per_class = {}
    for cls in ("signal", "decoy"):
        with _stage(f"single_photon_fraction[{cls}]"):
            try:
                delta1 = single_photon_fraction(bound, params, stats, cls)
            except ZeroDivisionError as exc:
                raise InconsistentStatistics(str(exc)) from exc
        if delta1 > 0:
            e1 = single_photon_qber_upper(params, stats, delta1, cls, (1.0 - r0) * S0)
            if e1.clamped:
                flags.append(f"e1_{cls}_clamped")
            kr = key_rate_per_pulse(stats.rate(cls), min(delta1, 1.0), getattr(stats, f"e_{cls}"), e1.value)
        else:
            e1 = QberBound(1.0, True)
            flags.append(f"no_single_photons_{cls}")
            kr = KeyRate(0.0, False)
        if not kr.secure:
            flags.append(f"rate_{cls}_clamped")
        per_class[cls] = (delta1, e1.value, kr)

    with _stage("theoretical_reference"):
        theory = theoretical_reference(params, stats)
    rate_sig = per_class["signal"][2].rate
    ratio = rate_sig / theory.rate_per_pulse if theory.rate_per_pulse > 0 else 0.0
    hz = params.pulse_rate_hz * params.class_fractions[0]

    return SecurityEstimate(
        delta1_signal=per_class["signal"][0],
        delta1_decoy=per_class["decoy"][0],
        e1_signal=per_class["signal"][1],
        e1_decoy=per_class["decoy"][1],
        rate_signal_per_pulse=rate_sig,
        rate_decoy_per_pulse=per_class["decoy"][2].rate,
        delta1_theory=theory.delta1,
        e1_theory=theory.e1,
        rate_theory_per_pulse=theory.rate_per_pulse,
        efficiency_ratio=ratio,
        s1=bound.s1,
        s1_prime=bound.s1_prime,
        r0=r0,
        secure_signal=per_class["signal"][2].secure,
        secure_decoy=per_class["decoy"][2].secure,
        rate_signal_hz=rate_sig * hz,
        rate_theory_hz=theory.rate_per_pulse * hz,
        flags=tuple(flags),
    )
