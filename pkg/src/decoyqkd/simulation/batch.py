"""Chunked, seed-reproducible Monte Carlo over many pulses.

A run of ``n`` pulses is cut into fixed-size chunks. Chunk ``k`` draws from
its own Philox stream keyed by ``(seed, stream_tag, k)``, so any partition of
the chunk range across processes merges to the same tallies.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from ..analysis import ObservedStatistics, ProtocolParameters, analyze
from ..errors import AnalysisError
from .channel import ChannelConfig, expected_statistics
from .kernels import DetectionTables, classify_pulses, detect_pulses, tally_outcomes

CHUNK_SIZE = 1 << 20

BATCH_STREAM = 0
ALICE_STREAM = 1
BOB_STREAM = 2
TEST_STREAM = 3


def chunk_rng(seed: int, stream: int, chunk: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream, chunk])))


def chunk_bounds(n_pulses: int, chunk: int, chunk_size: int = CHUNK_SIZE) -> tuple[int, int]:
    start = chunk * chunk_size
    return start, min(start + chunk_size, n_pulses)


def n_chunks(n_pulses: int, chunk_size: int = CHUNK_SIZE) -> int:
    return -(-n_pulses // chunk_size)


@dataclass
class BatchTally:
    """Counts indexed ``[class, outcome]`` with classes signal/decoy/vacuum."""

    counts: np.ndarray

    @classmethod
    def empty(cls) -> "BatchTally":
        return cls(np.zeros((3, 3), dtype=np.int64))

    def __add__(self, other: "BatchTally") -> "BatchTally":
        return BatchTally(self.counts + other.counts)

    @property
    def sent(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def clicks(self) -> np.ndarray:
        return self.counts[:, 1] + self.counts[:, 2]

    @property
    def errors(self) -> np.ndarray:
        return self.counts[:, 2]

    def to_statistics(self) -> ObservedStatistics:
        sent, clicks, errors = self.sent, self.clicks, self.errors
        s = np.divide(clicks, sent, out=np.zeros(3), where=sent > 0)
        e = np.divide(errors, clicks, out=np.zeros(3), where=clicks > 0)
        return ObservedStatistics(
            n_signal=int(sent[0]), n_decoy=int(sent[1]), n_vacuum=int(sent[2]),
            s_signal=float(s[0]), s_decoy=float(s[1]), s_vacuum=float(s[2]),
            e_signal=float(e[0]), e_decoy=float(e[1]),
        )


def _simulate_chunk(args) -> np.ndarray:
    seed, chunk, n_pulses, chunk_size, tables = args
    start, stop = chunk_bounds(n_pulses, chunk, chunk_size)
    n = stop - start
    rng = chunk_rng(seed, BATCH_STREAM, chunk)
    cls = classify_pulses(rng.random(n), tables.class_cdf)
    outcome = detect_pulses(cls, rng.random(n), rng.random(n), tables.poisson_cdf, tables.thresholds)
    return tally_outcomes(cls, outcome, 3)


def simulate_tallies(
    n_pulses: int,
    params: ProtocolParameters,
    channel: ChannelConfig,
    seed: int,
    chunks: Iterable[int] | None = None,
    workers: int = 1,
    chunk_size: int = CHUNK_SIZE,
) -> BatchTally:
    """Raw counts for the given chunk indices (all chunks by default)."""
    if n_pulses < 0:
        raise ValueError("n_pulses must be >= 0")
    tables = DetectionTables(params.intensities, params.class_fractions, channel)
    todo = range(n_chunks(n_pulses, chunk_size)) if chunks is None else chunks
    jobs = [(seed, k, n_pulses, chunk_size, tables) for k in todo]
    total = BatchTally.empty()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for counts in pool.map(_simulate_chunk, jobs):
                total.counts += counts
    else:
        for job in jobs:
            total.counts += _simulate_chunk(job)
    return total


def simulate_batch(
    n_pulses: int,
    params: ProtocolParameters,
    channel: ChannelConfig,
    seed: int,
    workers: int = 1,
) -> ObservedStatistics:
    """Observed statistics of ``n_pulses`` simulated pulses.

    The result depends only on ``seed``, never on ``workers``. Classes with no
    pulses report zero rates and show up as ``empty_*`` in ``flags``.
    """
    return simulate_tallies(n_pulses, params, channel, seed, workers=workers).to_statistics()


class SweepRow(NamedTuple):
    attenuation_db: float
    rate_theory: float
    rate_worstcase: float


def distance_sweep(
    params: ProtocolParameters,
    channel_template: ChannelConfig,
    attenuations_db: Sequence[float],
) -> list[SweepRow]:
    """Expected-value key rates over a list of link losses."""
    if len(attenuations_db) == 0:
        raise ValueError("need at least one attenuation")
    rows = []
    for db in attenuations_db:
        stats = expected_statistics(channel_template.with_attenuation(db), params)
        try:
            est = analyze(params, stats)
        except AnalysisError as exc:
            exc.stage = f"sweep@{db}dB/{exc.stage}"
            raise
        rows.append(SweepRow(float(db), est.rate_theory_per_pulse, est.rate_signal_per_pulse))
    return rows
