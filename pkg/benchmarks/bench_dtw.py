"""Timing comparison of the two DTW backends.

The jit kernel is the default; GESTFUSE_NO_NUMBA=1 selects the pure-numpy
anti-diagonal sweep. This script runs both in one process (importing the
dispatch module once per backend is impossible, so it calls the backend
functions directly) over the sequence sizes the feature stage actually
produces, plus larger ones to show scaling.

    python3 benchmarks/bench_dtw.py [--repeats N]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from gestfuse import _kernels


def time_fn(fn, costs, repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        start = time.perf_counter()
        for c in costs:
            fn(c)
        best = min(best, time.perf_counter() - start)
    return best / len(costs)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--batch", type=int, default=200,
                    help="cost matrices per timing batch")
    args = ap.parse_args()

    if not _kernels._HAVE_NUMBA:
        print("numba unavailable (or disabled); nothing to compare")
        return 1

    rng = np.random.default_rng(0)
    # (20, 13) frames is the MFCC segment shape the pairwise features use
    cases = [(20, 20, 13), (50, 50, 13), (100, 100, 13),
             (250, 250, 13), (500, 500, 13)]

    _kernels._dtw_numba(np.zeros((2, 2)))  # compile outside the timing loop

    print(f"{'size':>12} {'numba':>12} {'numpy':>12} {'speedup':>9}")
    for n, m, d in cases:
        costs = [_kernels.dtw_cost_matrix(rng.normal(size=(n, d)),
                                          rng.normal(size=(m, d)))
                 for _ in range(max(2, args.batch // (n // 10 or 1)))]
        t_nb = time_fn(_kernels._dtw_numba, costs, args.repeats)
        t_np = time_fn(_kernels._dtw_numpy, costs, args.repeats)
        for c in costs[:3]:  # backends must agree bit for bit
            assert _kernels._dtw_numba(c) == _kernels._dtw_numpy(c)
        print(f"{n:>5}x{m:<6} {t_nb*1e6:>10.1f}us {t_np*1e6:>10.1f}us "
              f"{t_np/t_nb:>8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
