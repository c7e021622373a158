"""Decoy-state BB84 toolkit: finite-size key-rate analysis, a Monte Carlo
channel simulator, a simulated two-party protocol session and a model of
automatic polarization compensation.
"""

from ._accel import BACKEND
from .analysis import (
    ObservedStatistics,
    ProtocolParameters,
    SecurityEstimate,
    analyze,
    binary_entropy,
    economic_s0_scan,
)
from .errors import (
    AnalysisError,
    DecoyQKDError,
    DegenerateIntensities,
    EmptySample,
    InconsistentStatistics,
    InsufficientSamples,
    NotConverged,
    ProtocolViolation,
    SessionAborted,
    TransportError,
    ValidationError,
)
from .simulation import ChannelConfig, expected_statistics, simulate_batch

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "AnalysisError",
    "ChannelConfig",
    "DecoyQKDError",
    "DegenerateIntensities",
    "EmptySample",
    "InconsistentStatistics",
    "InsufficientSamples",
    "NotConverged",
    "ObservedStatistics",
    "ProtocolParameters",
    "ProtocolViolation",
    "SecurityEstimate",
    "SessionAborted",
    "TransportError",
    "ValidationError",
    "analyze",
    "binary_entropy",
    "economic_s0_scan",
    "expected_statistics",
    "simulate_batch",
]
