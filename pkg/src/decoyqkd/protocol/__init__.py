from .messages import AliceReveal, BobAnnouncement, StatisticsAnnouncement, TestDisclosure
from .session import (
    DetectionLog,
    DetectionRecord,
    KeyMaterial,
    PreparationLog,
    PulsePreparation,
    PulseStream,
    SessionReport,
    SiftedBits,
    SiftResult,
    alice_run,
    attach_bits,
    bob_run,
    choose_test_indices,
    estimate_qber,
    run_session,
    sift,
)
from .transport import LoopbackTransport, SocketTransport, Transport

__all__ = [
    "AliceReveal",
    "BobAnnouncement",
    "DetectionLog",
    "DetectionRecord",
    "KeyMaterial",
    "LoopbackTransport",
    "PreparationLog",
    "PulsePreparation",
    "PulseStream",
    "SessionReport",
    "SiftResult",
    "SiftedBits",
    "SocketTransport",
    "StatisticsAnnouncement",
    "TestDisclosure",
    "Transport",
    "alice_run",
    "attach_bits",
    "bob_run",
    "choose_test_indices",
    "estimate_qber",
    "run_session",
    "sift",
]
