"""Exception hierarchy shared by the analysis, simulation and protocol layers."""

from __future__ import annotations


class DecoyQKDError(Exception):
    """Base class for all package errors."""


class ValidationError(DecoyQKDError, ValueError):
    """Input failed validation. ``problems`` maps field name to message."""

    def __init__(self, problems: dict[str, str]):
        self.problems = dict(problems)
        detail = "; ".join(f"{k}: {v}" for k, v in self.problems.items())
        super().__init__(f"invalid input ({detail})")


class AnalysisError(DecoyQKDError):
    """Failure inside the key-rate pipeline.

    ``stage`` is filled in by :func:`decoyqkd.analysis.analyze` with the name
    of the step that failed.
    """

    stage: str | None = None

    def __str__(self) -> str:
        msg = super().__str__()
        return f"[{self.stage}] {msg}" if self.stage else msg


class InconsistentStatistics(AnalysisError):
    """The observed rates admit no feasible single-photon yield."""


class InsufficientSamples(AnalysisError):
    """A finite-size correction drove a bound below zero."""


class DegenerateIntensities(AnalysisError, ValueError):
    """Decoy and signal intensities coincide."""


class EmptySample(DecoyQKDError):
    """A class had no sifted bits to estimate a QBER from."""


class ProtocolViolation(DecoyQKDError):
    """A peer sent a message inconsistent with the session state."""


class TransportError(DecoyQKDError):
    """The classical channel failed (closed, timed out, malformed frame)."""


class SessionAborted(DecoyQKDError):
    def __init__(self, last_phase: str, cause: BaseException | None = None):
        self.last_phase = last_phase
        self.cause = cause
        super().__init__(f"session aborted after phase {last_phase!r}: {cause}")


class NotConverged(DecoyQKDError):
    """Feedback loop exhausted its budget. ``trace`` holds the best run."""

    def __init__(self, message: str, trace):
        self.trace = trace
        super().__init__(message)
