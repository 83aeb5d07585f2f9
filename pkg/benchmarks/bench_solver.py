"""Compare the compiled and pure-Python solver kernels on random tracks.

    python3 benchmarks/bench_solver.py --tracks 2000 --views 3

Prints wall time per backend, the speedup, and the largest difference
between their outputs (expected to be exactly zero).
"""
import argparse
import math
import time

import numpy as np

from polarsfp import _backend
from polarsfp.polar import specular_dop
from polarsfp.solver import SolverConfig, solve_arrays


def random_tracks(count, views, seed=0):
    rng = np.random.default_rng(seed)
    n = rng.uniform(1.1, 2.2, count)
    # distinct zeniths below the Brewster angle, at least 1 degree apart
    hi = np.minimum(math.radians(85), np.arctan(n) - math.radians(1))[:, None]
    lo = math.radians(5)
    theta = np.sort(rng.uniform(0, 1, (count, views)), axis=1)
    theta = lo + (hi - lo - math.radians(1) * (views - 1)) * theta + math.radians(1) * np.arange(views)
    theta = rng.permuted(theta, axis=1)
    spec = rng.uniform(0.2, 0.8, (count, views))
    d = rng.uniform(0.2, 1.0, count)
    I = d[:, None] / (1 - spec)
    rho = specular_dop(theta, n[:, None]) * spec
    return I, rho, theta, d, n


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--tracks", type=int, default=2000)
    p.add_argument("--views", type=int, default=3)
    p.add_argument("--repeat", type=int, default=3)
    a = p.parse_args()
    I, rho, theta, d, n = random_tracks(a.tracks, a.views)
    cfg = SolverConfig()
    times = {}
    outs = {}
    for name in _backend.available():
        best = math.inf
        for _ in range(a.repeat if name == "cython" else 1):
            t0 = time.perf_counter()
            outs[name] = solve_arrays(I, rho, theta, cfg, threads=1, backend=name)
            best = min(best, time.perf_counter() - t0)
        times[name] = best
        err = np.max(np.abs(outs[name]["index"] - n))
        print(f"{name:>7}: {best:8.3f} s  ({a.tracks / best:10.0f} tracks/s)  max |n - n*| = {err:.2e}")
    if len(times) == 2:
        diff = max(np.max(np.abs(outs["cython"][k] - outs["python"][k])) for k in ("diffuse", "index", "zeniths"))
        print(f"speedup: {times['python'] / times['cython']:.1f}x  max backend difference: {diff:.3g}")


if __name__ == "__main__":
    main()
