"""Per-pulse inner loops.

Every kernel exists as a numba loop and as vectorised numpy. They consume
the same uniforms and lookup tables and must agree bit for bit; the public
names dispatch on :data:`decoyqkd._accel.BACKEND`.

Outcome codes: 0 no click, 1 correct click, 2 erroneous click.
"""

from __future__ import annotations

import math

import numpy as np

from .._accel import BACKEND, HAVE_NUMBA, njit
from .channel import ChannelConfig

NO_CLICK, CORRECT, ERROR = 0, 1, 2


class DetectionTables:
    """Lookup tables shared by both backends.

    ``poisson_cdf[c, k]`` is P(n <= k) for class ``c``; ``thresholds[k]``
    partitions [0, 1) into photon-error, photon-correct, dark-error,
    dark-correct and no-click for a pulse holding ``k`` photons.
    """

    def __init__(self, intensities, class_fractions, channel: ChannelConfig):
        lam_max = max(intensities)
        self.n_max = int(lam_max + 12.0 * math.sqrt(lam_max) + 24)
        ks = np.arange(self.n_max + 1)
        cdf = np.empty((len(intensities), self.n_max + 1))
        for c, lam in enumerate(intensities):
            if lam == 0:
                cdf[c] = 1.0
                continue
            log_pmf = -lam + ks * math.log(lam) - np.array([math.lgamma(k + 1) for k in ks])
            cdf[c] = np.minimum(np.cumsum(np.exp(log_pmf)), 1.0)
        self.poisson_cdf = cdf

        eta = channel.eta
        if eta >= 1.0:
            p = (ks > 0).astype(float)
        else:
            p = -np.expm1(ks * math.log1p(-eta))
        y0 = channel.dark_count_prob
        dark = (1.0 - p) * y0
        self.thresholds = np.column_stack([
            p * channel.misalignment_error,
            p,
            p + dark * channel.vacuum_error,
            p + dark,
        ])
        self.class_cdf = self.class_cdf_for(class_fractions)

    @staticmethod
    def class_cdf_for(class_fractions) -> np.ndarray:
        f = np.asarray(class_fractions, dtype=float)
        return np.cumsum(f)[:-1] / f.sum()


@njit(cache=True)
def _classify_numba(u, class_cdf):
    out = np.empty(u.shape[0], np.uint8)
    m = class_cdf.shape[0]
    for i in range(u.shape[0]):
        c = 0
        while c < m and u[i] >= class_cdf[c]:
            c += 1
        out[i] = c
    return out


def _classify_numpy(u, class_cdf):
    return np.searchsorted(class_cdf, u, side="right").astype(np.uint8)


@njit(cache=True)
def _detect_numba(cls, u_n, u_out, poisson_cdf, thresholds):
    n_max = poisson_cdf.shape[1] - 1
    out = np.empty(cls.shape[0], np.int8)
    for i in range(cls.shape[0]):
        c = cls[i]
        u = u_n[i]
        k = 0
        while k < n_max and u >= poisson_cdf[c, k]:
            k += 1
        v = u_out[i]
        if v < thresholds[k, 0]:
            out[i] = 2
        elif v < thresholds[k, 1]:
            out[i] = 1
        elif v < thresholds[k, 2]:
            out[i] = 2
        elif v < thresholds[k, 3]:
            out[i] = 1
        else:
            out[i] = 0
    return out


def _detect_numpy(cls, u_n, u_out, poisson_cdf, thresholds):
    n_max = poisson_cdf.shape[1] - 1
    k = np.empty(cls.shape[0], dtype=np.intp)
    for c in range(poisson_cdf.shape[0]):
        m = cls == c
        k[m] = np.searchsorted(poisson_cdf[c, :n_max], u_n[m], side="right")
    t = thresholds[k]
    v = u_out
    out = np.zeros(cls.shape[0], dtype=np.int8)
    out[v < t[:, 3]] = 1
    out[v < t[:, 2]] = 2
    out[v < t[:, 1]] = 1
    out[v < t[:, 0]] = 2
    return out


@njit(cache=True)
def _tally_numba(cls, outcome, n_classes):
    counts = np.zeros((n_classes, 3), np.int64)
    for i in range(cls.shape[0]):
        counts[cls[i], outcome[i]] += 1
    return counts


def _tally_numpy(cls, outcome, n_classes):
    flat = cls.astype(np.intp) * 3 + outcome
    return np.bincount(flat, minlength=n_classes * 3).reshape(n_classes, 3).astype(np.int64)


NUMPY_KERNELS = {
    "classify": _classify_numpy,
    "detect": _detect_numpy,
    "tally": _tally_numpy,
}
NUMBA_KERNELS = {
    "classify": _classify_numba,
    "detect": _detect_numba,
    "tally": _tally_numba,
} if HAVE_NUMBA else {}

_ACTIVE = NUMBA_KERNELS if BACKEND == "numba" else NUMPY_KERNELS
classify_pulses = _ACTIVE["classify"]
detect_pulses = _ACTIVE["detect"]
tally_outcomes = _ACTIVE["tally"]
