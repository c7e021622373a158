"""BB84 with decoy states: preparation, detection, sifting and QBER test.

Alice's preparation log is never materialised. Chunk ``k`` of her pulses
is a pure function of ``(seed, k)``, so she can regenerate any entry when
she answers Bob's announcement. That keeps memory flat for 10^9-pulse runs.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from ..analysis import (
    CLASSES,
    ObservedStatistics,
    ProtocolParameters,
    SecurityEstimate,
    analyze,
)
from ..errors import (
    AnalysisError,
    EmptySample,
    ProtocolViolation,
    SessionAborted,
    TransportError,
)
from ..simulation.batch import (
    ALICE_STREAM,
    BOB_STREAM,
    CHUNK_SIZE,
    TEST_STREAM,
    chunk_bounds,
    chunk_rng,
    n_chunks,
)
from ..simulation.channel import ChannelConfig
from ..simulation.kernels import ERROR, DetectionTables, classify_pulses, detect_pulses
from .messages import (
    Abort,
    AliceReveal,
    BobAnnouncement,
    StatisticsAnnouncement,
    TestDisclosure,
)
from .transport import LoopbackTransport, Transport

BASES = ("HV", "PM")
SIGNAL, DECOY, VACUUM = 0, 1, 2
DEFAULT_DISCLOSURE = 0.1


@dataclass(frozen=True)
class PulsePreparation:
    index: int
    pulse_class: str
    basis: str
    bit: int


@dataclass(frozen=True)
class DetectionRecord:
    index: int
    basis_bob: str
    bit_bob: int


@dataclass(frozen=True)
class PulseChunk:
    """A contiguous run of emitted pulses: what physically enters the fiber."""

    start: int
    classes: np.ndarray
    bases: np.ndarray
    bits: np.ndarray


class PreparationLog:
    """Alice's private record of every pulse she sent."""

    def __init__(self, seed: int, n_pulses: int, params: ProtocolParameters, chunk_size: int = CHUNK_SIZE):
        self.seed = seed
        self.n_pulses = n_pulses
        self.params = params
        self.chunk_size = chunk_size
        self._class_cdf = DetectionTables.class_cdf_for(params.class_fractions)
        self._chunk_counts: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return self.n_pulses

    def chunk(self, k: int) -> PulseChunk:
        start, stop = chunk_bounds(self.n_pulses, k, self.chunk_size)
        rng = chunk_rng(self.seed, ALICE_STREAM, k)
        classes = classify_pulses(rng.random(stop - start), self._class_cdf)
        choice = rng.integers(0, 4, stop - start, dtype=np.uint8)
        if k not in self._chunk_counts:
            self._chunk_counts[k] = np.bincount(classes, minlength=3)
        return PulseChunk(start, classes, choice >> 1, choice & 1)

    def class_counts(self) -> np.ndarray:
        for k in range(n_chunks(self.n_pulses, self.chunk_size)):
            if k not in self._chunk_counts:
                self.chunk(k)
        return sum(self._chunk_counts.values(), np.zeros(3, dtype=np.int64))

    def lookup(self, indices) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Class, basis and bit of the given pulse indices."""
        idx = np.asarray(indices, dtype=np.int64)
        classes = np.empty(idx.shape, np.uint8)
        bases = np.empty(idx.shape, np.uint8)
        bits = np.empty(idx.shape, np.uint8)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_pulses):
            raise IndexError("pulse index out of range")
        owners = idx // self.chunk_size
        for k in np.unique(owners):
            sel = owners == k
            ch = self.chunk(int(k))
            local = idx[sel] - ch.start
            classes[sel], bases[sel], bits[sel] = ch.classes[local], ch.bases[local], ch.bits[local]
        return classes, bases, bits

    def __getitem__(self, i: int) -> PulsePreparation:
        c, b, v = (int(a[0]) for a in self.lookup([i]))
        return PulsePreparation(i, CLASSES[c], BASES[b], v)


class PulseStream:
    """Iterator over emitted chunks; carries the physical intensities."""

    def __init__(self, log: PreparationLog):
        self._log = log
        self.intensities = log.params.intensities
        self.n_pulses = log.n_pulses
        self.chunk_size = log.chunk_size

    def __iter__(self) -> Iterator[PulseChunk]:
        for k in range(n_chunks(self.n_pulses, self.chunk_size)):
            yield self._log.chunk(k)


def alice_run(n_pulses: int, params: ProtocolParameters, randomness: int) -> tuple[PreparationLog, PulseStream]:
    if n_pulses < 0:
        raise ValueError("n_pulses must be >= 0")
    log = PreparationLog(randomness, n_pulses, params)
    return log, PulseStream(log)


@dataclass
class DetectionLog:
    indices: np.ndarray
    bases: np.ndarray
    bits: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self) -> Iterator[DetectionRecord]:
        for i, b, v in zip(self.indices, self.bases, self.bits):
            yield DetectionRecord(int(i), BASES[b], int(v))

    def bits_at(self, indices) -> np.ndarray:
        pos = np.searchsorted(self.indices, indices)
        if np.any(pos >= len(self.indices)) or np.any(self.indices[np.minimum(pos, len(self.indices) - 1)] != indices):
            raise ProtocolViolation("requested bits for pulses that were not detected")
        return self.bits[pos]


def bob_run(stream: PulseStream, channel: ChannelConfig, randomness: int) -> DetectionLog:
    """Measure every pulse in a random basis; keep only the clicks.

    Matched basis: Bob's bit is Alice's, flipped on an erroneous click.
    Mismatched basis: the outcome is a fair coin.
    """
    tables = DetectionTables(stream.intensities, (1.0, 1.0, 1.0), channel)
    found_idx, found_basis, found_bit = [], [], []
    for k, ch in enumerate(stream):
        n = len(ch.classes)
        rng = chunk_rng(randomness, BOB_STREAM, k)
        outcome = detect_pulses(ch.classes, rng.random(n), rng.random(n), tables.poisson_cdf, tables.thresholds)
        choice = rng.integers(0, 4, n, dtype=np.uint8)
        hit = np.flatnonzero(outcome)
        basis_b = choice[hit] >> 1
        coin = choice[hit] & 1
        flipped = ch.bits[hit] ^ (outcome[hit] == ERROR).astype(np.uint8)
        found_idx.append(hit + ch.start)
        found_basis.append(basis_b)
        found_bit.append(np.where(basis_b == ch.bases[hit], flipped, coin).astype(np.uint8))
    if not found_idx:
        empty = np.empty(0, np.uint8)
        return DetectionLog(np.empty(0, np.int64), empty, empty.copy())
    return DetectionLog(
        np.concatenate(found_idx).astype(np.int64),
        np.concatenate(found_basis),
        np.concatenate(found_bit),
    )


@dataclass
class SiftResult:
    detected: np.ndarray          # clicks per class before sifting
    kept: dict[str, np.ndarray]   # basis-matched indices per class


def sift(announcement: BobAnnouncement, reveal: AliceReveal) -> SiftResult:
    """Keep basis-matched detections and split them by class.

    Vacuum clicks are counted for the dark-count rate and never kept as key.
    """
    ann_idx = np.asarray(announcement.indices, dtype=np.int64)
    rev_idx = np.asarray(reveal.indices, dtype=np.int64)
    if len(reveal.classes) != len(rev_idx) or len(reveal.bases) != len(rev_idx):
        raise ProtocolViolation("reveal fields have different lengths")
    if len(announcement.bases) != len(ann_idx):
        raise ProtocolViolation("announcement fields have different lengths")
    if ann_idx.shape != rev_idx.shape or np.any(ann_idx != rev_idx):
        raise ProtocolViolation("reveal does not cover exactly the announced indices")
    classes = np.asarray(reveal.classes, dtype=np.int64)
    if classes.size and (classes.min() < 0 or classes.max() > 2):
        raise ProtocolViolation("unknown pulse class in reveal")
    match = np.asarray(reveal.bases) == np.asarray(announcement.bases)
    kept = {name: ann_idx[match & (classes == c)] for c, name in enumerate(CLASSES)}
    return SiftResult(np.bincount(classes, minlength=3), kept)


@dataclass
class SiftedBits:
    index: np.ndarray
    bit_alice: np.ndarray
    bit_bob: np.ndarray

    def __len__(self) -> int:
        return len(self.index)


def attach_bits(result: SiftResult, log: PreparationLog, detections: DetectionLog) -> dict[str, SiftedBits]:
    """Join both parties' private bits onto the sifted indices."""
    out = {}
    for name, idx in result.kept.items():
        out[name] = SiftedBits(idx, log.lookup(idx)[2], detections.bits_at(idx))
    return out


def choose_test_indices(kept: dict[str, np.ndarray], fraction: float, rng: np.random.Generator) -> np.ndarray:
    """All sifted decoy indices plus a uniform sample of signal indices."""
    if not 0 < fraction <= 1:
        raise ValueError("disclosure fraction must be in (0, 1]")
    signal = kept["signal"]
    k = math.ceil(fraction * len(signal))
    sample = np.sort(rng.choice(signal, size=k, replace=False)) if k else signal[:0]
    return np.union1d(kept["decoy"], sample)


@dataclass
class KeyMaterial:
    indices: np.ndarray
    bits_alice: np.ndarray
    bits_bob: np.ndarray

    @property
    def size(self) -> int:
        return len(self.indices)

    @property
    def errors(self) -> int:
        return int(np.count_nonzero(self.bits_alice != self.bits_bob))


def _observed(sent, detected, decoy_pairs, signal_pairs) -> ObservedStatistics:
    sent = np.asarray(sent)
    rates = np.divide(detected, sent, out=np.zeros(3), where=sent > 0)

    def qber(a, b):
        return float(np.count_nonzero(a != b) / len(a))

    return ObservedStatistics(
        n_signal=int(sent[0]), n_decoy=int(sent[1]), n_vacuum=int(sent[2]),
        s_signal=float(rates[0]), s_decoy=float(rates[1]), s_vacuum=float(rates[2]),
        e_signal=qber(*signal_pairs), e_decoy=qber(*decoy_pairs),
    )


def estimate_qber(
    sifted: dict[str, SiftedBits],
    disclosure_fraction: float,
    randomness,
    sent_counts,
    detected_counts,
) -> tuple[ObservedStatistics, KeyMaterial]:
    """Disclose the test bits, estimate both QBERs, return the rest as key.

    Every sifted decoy bit and ``disclosure_fraction`` of the sifted signal
    bits are sacrificed. Counting rates are clicks per sent pulse of each
    class, before sifting.
    """
    rng = randomness if isinstance(randomness, np.random.Generator) else np.random.default_rng(randomness)
    for name in ("signal", "decoy"):
        if len(sifted[name]) == 0:
            raise EmptySample(f"no sifted {name} bits")
    test = choose_test_indices({k: v.index for k, v in sifted.items()}, disclosure_fraction, rng)
    sig, dec = sifted["signal"], sifted["decoy"]
    sampled = np.isin(sig.index, test)
    stats = _observed(
        sent_counts, detected_counts,
        (dec.bit_alice, dec.bit_bob),
        (sig.bit_alice[sampled], sig.bit_bob[sampled]),
    )
    keep = ~sampled
    return stats, KeyMaterial(sig.index[keep], sig.bit_alice[keep], sig.bit_bob[keep])


@dataclass
class SessionReport:
    n_pulses: int
    seed: int
    secure: bool
    statistics: ObservedStatistics | None
    estimate: SecurityEstimate | None
    detected: dict[str, int]
    sifted: dict[str, int]
    test_bits: int
    key_bits: int
    key_errors: int
    secure_key_bits: int
    failure: str | None = None
    messages: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["statistics"] = self.statistics.to_dict() if self.statistics else None
        d["estimate"] = self.estimate.to_dict() if self.estimate else None
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "SessionReport":
        doc = dict(doc)
        if doc["statistics"] is not None:
            doc["statistics"] = ObservedStatistics.from_dict(doc["statistics"])
        if doc["estimate"] is not None:
            doc["estimate"] = SecurityEstimate.from_dict(doc["estimate"])
        return cls(**doc)


def _expect(message, kind):
    if isinstance(message, Abort):
        raise ProtocolViolation(f"peer aborted: {message.reason}")
    if not isinstance(message, kind):
        raise ProtocolViolation(f"expected {kind.__name__}, got {type(message).__name__}")
    return message


def run_session(
    n_pulses: int,
    params: ProtocolParameters,
    channel: ChannelConfig,
    seed: int,
    transport: tuple[Transport, Transport] | None = None,
    disclosure_fraction: float = DEFAULT_DISCLOSURE,
) -> SessionReport:
    """Run one complete session and analyse it.

    ``transport`` is an ``(alice_end, bob_end)`` pair; a loopback pair is
    created when omitted. Transport or protocol failures raise
    :class:`SessionAborted` naming the last phase that completed.
    """
    alice_end, bob_end = transport if transport is not None else LoopbackTransport.pair()
    phase = "start"
    try:
        # quantum transmission
        log, stream = alice_run(n_pulses, params, seed)
        detections = bob_run(stream, channel, seed)
        sent = log.class_counts()
        phase = "transmit"

        bob_end.send(BobAnnouncement(detections.indices.tolist(), detections.bases.tolist()))
        announcement = _expect(alice_end.recv(), BobAnnouncement)
        ann_idx = np.asarray(announcement.indices, dtype=np.int64)
        if ann_idx.size and (np.any(np.diff(ann_idx) <= 0) or ann_idx[0] < 0 or ann_idx[-1] >= n_pulses):
            raise ProtocolViolation("announced indices must be increasing and in range")
        phase = "announce"

        classes, bases_a, bits_a = log.lookup(ann_idx)
        alice_reveal = AliceReveal(announcement.indices, classes.tolist(), bases_a.tolist())
        alice_end.send(alice_reveal)
        reveal = _expect(bob_end.recv(), AliceReveal)
        phase = "reveal"

        bob_view = sift(BobAnnouncement(detections.indices.tolist(), detections.bases.tolist()), reveal)
        alice_view = sift(announcement, alice_reveal)
        phase = "sift"

        test_rng = chunk_rng(seed, TEST_STREAM, 0)
        test_idx = choose_test_indices(bob_view.kept, disclosure_fraction, test_rng)
        bob_end.send(TestDisclosure(test_idx.tolist(), detections.bits_at(test_idx).tolist()))
        disclosure = _expect(alice_end.recv(), TestDisclosure)
        phase = "disclose"

        failure = None
        statistics = None
        disc_idx = np.asarray(disclosure.indices, dtype=np.int64)
        if not np.all(np.isin(alice_view.kept["decoy"], disc_idx)):
            raise ProtocolViolation("disclosure must include every sifted decoy bit")
        allowed = np.union1d(alice_view.kept["signal"], alice_view.kept["decoy"])
        if not np.all(np.isin(disc_idx, allowed)):
            raise ProtocolViolation("disclosed indices are not sifted key bits")
        if len(alice_view.kept["signal"]) == 0 or len(alice_view.kept["decoy"]) == 0:
            failure = "EmptySample: no sifted bits in a key-relevant class"
            alice_end.send(Abort(failure))
        else:
            bits_bob = np.asarray(disclosure.bits, dtype=np.uint8)
            disc_cls = classes[np.searchsorted(ann_idx, disc_idx)]
            bits_alice = bits_a[np.searchsorted(ann_idx, disc_idx)]
            dec, sig = disc_cls == DECOY, disc_cls == SIGNAL
            if not np.any(sig):
                failure = "EmptySample: no signal bits disclosed"
                alice_end.send(Abort(failure))
            else:
                statistics = _observed(
                    sent, alice_view.detected,
                    (bits_alice[dec], bits_bob[dec]),
                    (bits_alice[sig], bits_bob[sig]),
                )
                alice_end.send(StatisticsAnnouncement(statistics.to_dict()))
        reply = bob_end.recv()
        if isinstance(reply, StatisticsAnnouncement):
            statistics = ObservedStatistics.from_dict(reply.statistics)
        elif not isinstance(reply, Abort):
            raise ProtocolViolation(f"unexpected {type(reply).__name__}")
        phase = "estimate"
    except (TransportError, ProtocolViolation) as exc:
        raise SessionAborted(phase, exc) from exc

    estimate = None
    if statistics is not None:
        try:
            estimate = analyze(params, statistics)
        except AnalysisError as exc:
            failure = f"{type(exc).__name__}: {exc}"

    signal_kept = bob_view.kept["signal"]
    key_idx = np.setdiff1d(signal_kept, test_idx, assume_unique=True)
    key_errors = int(np.count_nonzero(log.lookup(key_idx)[2] != detections.bits_at(key_idx)))
    secure = estimate is not None and estimate.secure_signal
    secure_bits = int(estimate.rate_signal_per_pulse * int(sent[SIGNAL])) if secure else 0
    return SessionReport(
        n_pulses=n_pulses,
        seed=seed,
        secure=secure,
        statistics=statistics,
        estimate=estimate,
        detected={name: int(c) for name, c in zip(CLASSES, bob_view.detected)},
        sifted={name: len(v) for name, v in bob_view.kept.items()},
        test_bits=len(test_idx),
        key_bits=len(key_idx),
        key_errors=key_errors,
        secure_key_bits=secure_bits,
        failure=failure,
        messages={
            "alice_sent": alice_end.sent_messages,
            "bob_sent": bob_end.sent_messages,
            "bytes": alice_end.sent_bytes + bob_end.sent_bytes,
        },
    )
