"""Compiled against pure-Python kernels on representative problem sizes.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel with the best wall time of each backend and the
largest difference between their outputs relative to the output scale.
"""
import argparse
import time

import numpy as np

from kec import kernels
from kec.control import ControlSpec
from kec.sgkinetic import EpiParams


def _conservative_system(rng, n, k=None):
    if k is None:
        lower = rng.uniform(0.0, 1.0, n)
        upper = rng.uniform(0.0, 1.0, n)
        lower[0] = upper[-1] = 0.0
        return lower, upper, np.full(n, 0.1), rng.uniform(0.0, 1.0, (n, 4))
    lower = rng.uniform(0.0, 1.0, (n, k, k)) / k
    upper = rng.uniform(0.0, 1.0, (n, k, k)) / k
    lower[0] = upper[-1] = 0.0
    return lower, upper, np.full(n, 0.1), rng.uniform(0.0, 1.0, (n, k))


def _best(fn, repeat):
    best, out = np.inf, None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if kernels.BACKEND != "cython":
        print("compiled core not available; nothing to compare")
        return 0
    rng = np.random.default_rng(0)
    tri = _conservative_system(rng, 10001)
    blk = _conservative_system(rng, 2001, 6)
    y0 = np.tile([0.97, 0.01, 0.01, 0.01, 10.0, 10.0, 3.0, 10.0], (2, 1))
    seir = (y0, np.array([1.2, 1.25]), EpiParams(0.02, 1 / 3.32, 0.1), ControlSpec("sqrtx", 5.0, 0.1), 3.0,
            1e-12, 0.01, 2000, 100)
    cases = [
        ("tridiag n=10001 r=4", lambda b: kernels.solve_tridiag(*tri, backend=b)),
        ("block n=2001 K=6", lambda b: kernels.solve_block_tridiag(*blk, backend=b)),
        ("seir_rk4 2 atoms x 2000 steps", lambda b: kernels.integrate_seir(*seir, backend=b)),
    ]
    print(f"{'kernel':32s} {'cython [s]':>12s} {'python [s]':>12s} {'speedup':>9s} {'rel diff':>10s}")
    for name, fn in cases:
        tc, oc = _best(lambda: fn("cython"), args.repeat)
        tp, op = _best(lambda: fn("python"), max(1, args.repeat // 2))
        print(f"{name:32s} {tc:12.5f} {tp:12.5f} {tp / tc:9.1f} {np.max(np.abs(oc - op)) / np.max(np.abs(oc)):10.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
