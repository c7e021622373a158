"""Time the numba and numpy Monte Carlo kernels on identical inputs.

Usage: python3 benchmarks/bench_kernels.py [n_pulses] [repeats]
"""
import sys
import time

import numpy as np

from decoyqkd import presets
from decoyqkd._accel import HAVE_NUMBA
from decoyqkd.simulation.kernels import NUMBA_KERNELS, NUMPY_KERNELS, DetectionTables


def run(kernels, u, tables):
    cls = kernels["classify"](u[0], tables.class_cdf)
    det = kernels["detect"](cls, u[1], u[2], tables.poisson_cdf, tables.thresholds)
    return kernels["tally"](cls, det, 3)


def best_time(kernels, u, tables, repeats):
    run(kernels, u[:, :1000], tables)  # JIT warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        counts = run(kernels, u, tables)
        times.append(time.perf_counter() - t0)
    return min(times), counts


def main(argv):
    n = int(argv[1]) if len(argv) > 1 else 5_000_000
    repeats = int(argv[2]) if len(argv) > 2 else 3
    params = presets.paper_params()
    tables = DetectionTables(params.intensities, params.class_fractions, presets.channel_75km())
    u = np.random.default_rng(0).random((3, n))
    results = {"numpy": best_time(NUMPY_KERNELS, u, tables, repeats)}
    if HAVE_NUMBA:
        results["numba"] = best_time(NUMBA_KERNELS, u, tables, repeats)
    print(f"{'backend':<8} {'seconds':>9} {'Mpulse/s':>9}")
    for name, (t, _) in results.items():
        print(f"{name:<8} {t:>9.3f} {n / t / 1e6:>9.1f}")
    if "numba" in results:
        same = np.array_equal(results["numba"][1], results["numpy"][1])
        print(f"speedup {results['numpy'][0] / results['numba'][0]:.1f}x, identical tallies: {same}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
