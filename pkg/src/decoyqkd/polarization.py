"""Poincaré-sphere model of fiber polarization drift and its compensation.

Polarization states are unit Stokes vectors; every optical element is a
rotation of the sphere. |H> sits on +S1 and |+> on +S2, so the two
calibration states probe orthogonal axes and together pin down the full
rotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, NamedTuple

import numpy as np

from .errors import NotConverged

S1 = np.array([1.0, 0.0, 0.0])
S2 = np.array([0.0, 1.0, 0.0])
S3 = np.array([0.0, 0.0, 1.0])
REFERENCES = {"H": S1, "Plus": S2}
BB84_STATES = (S1, -S1, S2, -S2)

# squeezers alternate between two equatorial axes
COMPENSATOR_AXES = (S1, S2, S1, S2)
DEFAULT_TARGET = 0.985
INITIAL_STEP = math.pi / 8
MIN_STEP = 1e-3
_NORM_TOL = 1e-9
_TWO_PI = 2.0 * math.pi


def _unit(v, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (3,) or abs(np.linalg.norm(v) - 1.0) > _NORM_TOL:
        raise ValueError(f"{what} must be a unit 3-vector, got {v!r}")
    return v


@dataclass(frozen=True)
class PolarizationState:
    stokes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "stokes", _unit(self.stokes, "Stokes vector"))

    @classmethod
    def horizontal(cls) -> "PolarizationState":
        return cls(S1.copy())

    @classmethod
    def plus(cls) -> "PolarizationState":
        return cls(S2.copy())


def rotation_matrix(axis, angle: float) -> np.ndarray:
    k = _unit(axis, "rotation axis")
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * kx + (1.0 - math.cos(angle)) * (kx @ kx)


def apply_rotation(state: PolarizationState, axis, angle: float) -> PolarizationState:
    """Rotate a state about ``axis`` by ``angle`` (Rodrigues' formula)."""
    k = _unit(axis, "rotation axis")
    v = state.stokes
    out = v * math.cos(angle) + np.cross(k, v) * math.sin(angle) + k * (k @ v) * (1.0 - math.cos(angle))
    # renormalise away rounding so long chains stay on the sphere
    return PolarizationState(out / np.linalg.norm(out))


def random_axis(rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class FiberTransform:
    """Net rotation the fiber applies, stored as an orthogonal matrix."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "FiberTransform":
        return cls(rotation_matrix(axis, angle))

    @classmethod
    def random(cls, rng: np.random.Generator) -> "FiberTransform":
        """Haar-uniform rotation."""
        q = rng.standard_normal(4)
        w, x, y, z = q / np.linalg.norm(q)
        m = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ])
        return cls(m)

    @property
    def axis_angle(self) -> tuple[np.ndarray, float]:
        m = self.matrix
        angle = math.acos(max(-1.0, min(1.0, (np.trace(m) - 1.0) / 2.0)))
        if angle < 1e-12:
            return S1.copy(), 0.0
        if math.pi - angle < 1e-6:
            # axis from the symmetric part when sin(angle) ~ 0
            b = (m + np.eye(3)) / 2.0
            col = np.argmax(np.diag(b))
            axis = b[:, col] / math.sqrt(b[col, col])
            return axis / np.linalg.norm(axis), angle
        axis = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
        return axis / np.linalg.norm(axis), angle

    def then(self, rotation: np.ndarray) -> "FiberTransform":
        return FiberTransform(rotation @ self.matrix)

    def apply(self, state: PolarizationState) -> PolarizationState:
        out = self.matrix @ state.stokes
        return PolarizationState(out / np.linalg.norm(out))


@dataclass(frozen=True)
class CompensatorState:
    """Retardations of the four fiber squeezers, applied in order."""

    angles: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.angles) != len(COMPENSATOR_AXES):
            raise ValueError("compensator has exactly four squeezers")
        object.__setattr__(self, "angles", tuple(float(a) % _TWO_PI for a in self.angles))

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(3)
        for axis, angle in zip(COMPENSATOR_AXES, self.angles):
            m = rotation_matrix(axis, angle) @ m
        return m

    def with_angle(self, i: int, value: float) -> "CompensatorState":
        angles = list(self.angles)
        angles[i] = value
        return CompensatorState(tuple(angles))


def drift_step(fiber: FiberTransform, magnitude: float, randomness=None) -> FiberTransform:
    """Compose one random-walk increment of polarization-mode drift."""
    if magnitude < 0:
        raise ValueError("drift magnitude must be >= 0")
    if magnitude == 0:
        return fiber
    rng = np.random.default_rng(randomness)
    return fiber.then(rotation_matrix(random_axis(rng), rng.normal(0.0, magnitude)))


def disturb(fiber: FiberTransform, angle: float, randomness=None) -> FiberTransform:
    """Sudden rotation by ``angle`` about a random axis (e.g. a touched fiber)."""
    rng = np.random.default_rng(randomness)
    return fiber.then(rotation_matrix(random_axis(rng), angle))


def visibility(
    fiber: FiberTransform,
    compensator: CompensatorState,
    reference: Literal["H", "Plus"],
) -> float:
    """Probability that a calibration state leaves on the correct detector."""
    ref = REFERENCES[reference]
    out = compensator.matrix @ fiber.matrix @ ref
    return float(min(1.0, max(0.0, (1.0 + out @ ref) / 2.0)))


def bb84_qber(fiber: FiberTransform, compensator: CompensatorState, n_samples: int = 0, randomness=None) -> float:
    """Error probability of uniformly chosen BB84 states through the chain.

    With ``n_samples`` > 0 this is a Monte Carlo estimate from simulated
    detector outcomes, otherwise the exact average.
    """
    chain = compensator.matrix @ fiber.matrix
    p_err = np.array([(1.0 - (chain @ s) @ s) / 2.0 for s in BB84_STATES])
    if n_samples <= 0:
        return float(p_err.mean())
    rng = np.random.default_rng(randomness)
    which = rng.integers(0, 4, n_samples)
    return float(np.mean(rng.random(n_samples) < p_err[which]))


class ApcTraceRow(NamedTuple):
    iteration: int
    v_h: float
    v_plus: float


class ApcRun(NamedTuple):
    trace: list[ApcTraceRow]
    compensator: CompensatorState
    converged: bool


def run_apc(
    fiber: FiberTransform,
    compensator: CompensatorState,
    target_visibility: float = DEFAULT_TARGET,
    max_iterations: int = 500,
    randomness=None,
    initial_step: float = INITIAL_STEP,
    counts_per_probe: int | None = None,
) -> ApcRun:
    """Coordinate-wise hill climbing on ``min(V_H, V_Plus)``.

    Each iteration probes one squeezer at ``angle - step`` and
    ``angle + step`` and keeps the best of the three settings. After a full
    sweep without improvement the step is halved.

    The min() objective has ridges where V_H == V_Plus and no single squeezer
    can raise both. Once the step shrinks below ``MIN_STEP`` the loop
    switches to probing random directions in the four-angle space, one per
    iteration, at the initial step size. The first improving direction is
    taken and coordinate sweeps resume from ``initial_step``. Only improving
    moves are ever accepted.

    With ``counts_per_probe`` set, visibilities are estimated from that many
    simulated detections rather than read exactly.

    Raises :class:`NotConverged` (carrying the run) if the target is not
    reached within ``max_iterations``.
    """
    if not 0.5 < target_visibility <= 1.0:
        raise ValueError("target visibility must lie in (0.5, 1]")
    if max_iterations < 1:
        raise ValueError("max_iterations must be >= 1")
    rng = np.random.default_rng(randomness)
    n_axes = len(COMPENSATOR_AXES)

    def measure(comp: CompensatorState) -> tuple[float, float]:
        vh, vp = visibility(fiber, comp, "H"), visibility(fiber, comp, "Plus")
        if counts_per_probe:
            vh = rng.binomial(counts_per_probe, vh) / counts_per_probe
            vp = rng.binomial(counts_per_probe, vp) / counts_per_probe
        return vh, vp

    current = compensator
    vh, vp = measure(current)
    trace = [ApcTraceRow(0, vh, vp)]
    step = initial_step
    improved_in_sweep = False
    stalled = False
    sweep_pos = 0
    it = 0
    while min(vh, vp) < target_visibility and it < max_iterations:
        it += 1
        if stalled:
            d = rng.standard_normal(n_axes)
            d *= initial_step / np.linalg.norm(d)
            candidates = [CompensatorState(tuple(np.add(current.angles, s * d))) for s in (-1, 1)]
        else:
            i = sweep_pos
            candidates = [current.with_angle(i, current.angles[i] + s * step) for s in (-1, 1)]
        best = (min(vh, vp), current, vh, vp)
        for cand in candidates:
            ch, cp = measure(cand)
            if min(ch, cp) > best[0]:
                best = (min(ch, cp), cand, ch, cp)
        moved = best[1] is not current
        if moved:
            current, vh, vp = best[1], best[2], best[3]
        trace.append(ApcTraceRow(it, vh, vp))

        if stalled:
            if moved:
                stalled, step, sweep_pos, improved_in_sweep = False, initial_step, 0, False
            continue
        improved_in_sweep |= moved
        sweep_pos = (sweep_pos + 1) % n_axes
        if sweep_pos == 0:
            if not improved_in_sweep:
                step /= 2.0
                stalled = step < MIN_STEP
            improved_in_sweep = False

    run = ApcRun(trace, current, min(vh, vp) >= target_visibility)
    if not run.converged:
        raise NotConverged(
            f"min visibility {min(vh, vp):.4f} below target {target_visibility} "
            f"after {max_iterations} iterations", run)
    return run


def misalignment_from_apc(run: ApcRun, residual_drift: float = 0.0) -> float:
    """Channel misalignment error implied by a finished calibration.

    ``1 - V`` at the final compensator setting, plus ``residual_drift`` for
    the visibility lost while the link free-runs between calibrations.
    """
    if residual_drift < 0:
        raise ValueError("residual_drift must be >= 0")
    last = run.trace[-1]
    return min(1.0, 1.0 - min(last.v_h, last.v_plus) + residual_drift)
