"""Backend selection for the numeric kernels.

Kernels are written twice: a numba ``@njit`` loop and a vectorised numpy
version. Both consume the same pre-drawn uniforms, so they return identical
results. Set ``DECOYQKD_DISABLE_NUMBA=1`` to force the numpy path.
"""

from __future__ import annotations

import os

_FLAG = "DECOYQKD_DISABLE_NUMBA"


def _numba_requested() -> bool:
    return os.environ.get(_FLAG, "").strip().lower() not in {"1", "true", "yes", "on"}


try:
    if not _numba_requested():
        raise ImportError("numba disabled by " + _FLAG)
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via subprocess test
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn


BACKEND = "numba" if HAVE_NUMBA else "numpy"
