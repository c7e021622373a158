"""Weak-coherent-pulse channel and threshold-detector model."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Literal, NamedTuple

import numpy as np

from ..analysis import ObservedStatistics, ProtocolParameters
from ..errors import ValidationError

__all__ = [
    "PAPER_ATTENUATIONS_DB",
    "ChannelConfig",
    "DetectionOutcome",
    "as_generator",
    "expected_rates",
    "expected_statistics",
    "fit_misalignment",
    "sample_photon_number",
    "simulate_pulse",
    "transmittance_from_db",
]

# 13.448, 50.524, 75.774 and 102.714 km links, all losses included
PAPER_ATTENUATIONS_DB = (24.9, 32.2, 34.8, 37.0)


def transmittance_from_db(db: float) -> float:
    if db < 0:
        raise ValueError(f"attenuation must be >= 0 dB, got {db!r}")
    return 10.0 ** (-db / 10.0)


@dataclass(frozen=True)
class ChannelConfig:
    """End-to-end loss, background and misalignment of one link.

    ``total_attenuation_db`` already includes detector efficiency and every
    insertion loss, so ``eta`` is the probability that a single photon
    produces a click.
    """

    total_attenuation_db: float
    dark_count_prob: float = 0.0
    misalignment_error: float = 0.0
    vacuum_error: float = 0.5
    scheme: Literal["one-detector", "two-detector"] = "one-detector"

    def __post_init__(self):
        problems = {}
        if not self.total_attenuation_db >= 0:
            problems["total_attenuation_db"] = "must be >= 0"
        for name in ("dark_count_prob", "misalignment_error"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems[name] = "must be a probability"
        if self.vacuum_error != 0.5:
            problems["vacuum_error"] = "dark clicks are unbiased; must be 0.5"
        if self.scheme not in ("one-detector", "two-detector"):
            problems["scheme"] = "must be 'one-detector' or 'two-detector'"
        if problems:
            raise ValidationError(problems)

    @property
    def eta(self) -> float:
        return transmittance_from_db(self.total_attenuation_db)

    def with_attenuation(self, db: float) -> "ChannelConfig":
        return replace(self, total_attenuation_db=db)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ChannelConfig":
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError({k: "unknown field" for k in sorted(unknown)})
        return cls(**doc)


class DetectionOutcome(NamedTuple):
    clicked: bool
    erroneous: bool


def expected_rates(channel: ChannelConfig, intensity: float) -> tuple[float, float]:
    """Counting rate and QBER of a class in expectation."""
    p_photon = -math.expm1(-channel.eta * intensity)
    s = 1.0 - (1.0 - channel.dark_count_prob) * (1.0 - p_photon)
    if s == 0:
        return 0.0, 0.0
    wrong = channel.vacuum_error * channel.dark_count_prob + channel.misalignment_error * p_photon
    return s, wrong / s


def expected_statistics(channel: ChannelConfig, params: ProtocolParameters) -> ObservedStatistics:
    (s_sig, e_sig), (s_dec, e_dec), (s_vac, _) = (
        expected_rates(channel, lam) for lam in params.intensities
    )
    return ObservedStatistics.from_params(
        params,
        s_signal=s_sig, s_decoy=s_dec, s_vacuum=s_vac,
        e_signal=e_sig, e_decoy=e_dec,
    )


def fit_misalignment(
    attenuation_db: float, dark_count_prob: float, intensity: float, target_qber: float
) -> float:
    """Misalignment that makes a class reach ``target_qber`` in expectation."""
    probe = ChannelConfig(attenuation_db, dark_count_prob)
    s, _ = expected_rates(probe, intensity)
    p_photon = -math.expm1(-probe.eta * intensity)
    e_d = (target_qber * s - 0.5 * dark_count_prob) / p_photon
    if not 0.0 <= e_d <= 1.0:
        raise ValueError("target QBER is not reachable with this dark-count level")
    return e_d


def as_generator(randomness) -> np.random.Generator:
    if isinstance(randomness, np.random.Generator):
        return randomness
    return np.random.default_rng(randomness)


def sample_photon_number(intensity: float, randomness=None) -> int:
    if intensity < 0:
        raise ValueError("intensity must be >= 0")
    return int(as_generator(randomness).poisson(intensity))


def simulate_pulse(
    intensity: float,
    channel: ChannelConfig,
    randomness=None,
    photon_number: int | None = None,
) -> DetectionOutcome:
    """One pulse through the channel, sampled event by event.

    Photon and dark clicks are drawn independently; if both fire, the photon
    decides whether the bit is wrong. ``photon_number`` pins the Fock
    component instead of drawing it.
    """
    rng = as_generator(randomness)
    n = sample_photon_number(intensity, rng) if photon_number is None else photon_number
    photon = n > 0 and rng.random() < 1.0 - (1.0 - channel.eta) ** n
    dark = rng.random() < channel.dark_count_prob
    if photon:
        return DetectionOutcome(True, bool(rng.random() < channel.misalignment_error))
    if dark:
        return DetectionOutcome(True, bool(rng.random() < channel.vacuum_error))
    return DetectionOutcome(False, False)
