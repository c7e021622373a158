from .batch import (
    CHUNK_SIZE,
    BatchTally,
    SweepRow,
    chunk_rng,
    distance_sweep,
    simulate_batch,
    simulate_tallies,
)
from .channel import (
    PAPER_ATTENUATIONS_DB,
    ChannelConfig,
    DetectionOutcome,
    expected_rates,
    expected_statistics,
    fit_misalignment,
    sample_photon_number,
    simulate_pulse,
    transmittance_from_db,
)

__all__ = [
    "CHUNK_SIZE",
    "PAPER_ATTENUATIONS_DB",
    "BatchTally",
    "ChannelConfig",
    "DetectionOutcome",
    "SweepRow",
    "chunk_rng",
    "distance_sweep",
    "expected_rates",
    "expected_statistics",
    "fit_misalignment",
    "sample_photon_number",
    "simulate_batch",
    "simulate_pulse",
    "simulate_tallies",
    "transmittance_from_db",
]
