"""Timing comparison of the two momentum-SGD update backends.

The fused jit kernel rewrites velocity and weights in one pass;
GESTFUSE_NO_NUMBA=1 selects the three-pass pure-numpy fallback. Sizes
mirror the fusion heads actually trained: the first linear layer of a
wide feature-level head down to the classifier output layer.

    python3 benchmarks/bench_sgd.py [--repeats N]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from gestfuse import _kernels


def numpy_update(w, v, g, lr, momentum):
    lr_t = w.dtype.type(lr)
    mu_t = w.dtype.type(momentum)
    v *= mu_t
    v -= lr_t * g
    w += v


def time_fn(fn, arrays, lr, momentum, repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        start = time.perf_counter()
        for w, v, g in arrays:
            fn(w, v, g, lr, momentum)
        best = min(best, time.perf_counter() - start)
    return best / len(arrays)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--batch", type=int, default=20,
                    help="parameter tensors per timing batch")
    args = ap.parse_args()

    if not _kernels._HAVE_NUMBA:
        print("numba unavailable (or disabled); nothing to compare")
        return 1

    rng = np.random.default_rng(0)
    cases = [(512, 9), (512, 512), (1027, 512), (4527, 512), (9027, 512)]

    warm = np.zeros(4, dtype=np.float32)
    _kernels._sgd_update_numba(warm, warm.copy(), warm.copy(),
                               np.float32(0.01), np.float32(0.9))

    print(f"{'size':>12} {'numba':>12} {'numpy':>12} {'speedup':>9}")
    for n_in, n_out in cases:
        arrays = [
            tuple(rng.normal(size=(n_in, n_out)).astype(np.float32)
                  for _ in range(3))
            for _ in range(args.batch)
        ]
        # backends must agree bit for bit
        w0, v0, g0 = (a.copy() for a in arrays[0])
        w1, v1, g1 = (a.copy() for a in arrays[0])
        _kernels._sgd_update_numba(w0.reshape(-1), v0.reshape(-1), g0.reshape(-1),
                                   np.float32(0.01), np.float32(0.9))
        numpy_update(w1, v1, g1, 0.01, 0.9)
        assert np.array_equal(w0, w1) and np.array_equal(v0, v1)

        t_nb = time_fn(
            lambda w, v, g, lr, mu: _kernels._sgd_update_numba(
                w.reshape(-1), v.reshape(-1), g.reshape(-1),
                np.float32(lr), np.float32(mu)),
            arrays, 0.01, 0.9, args.repeats)
        t_np = time_fn(numpy_update, arrays, 0.01, 0.9, args.repeats)
        print(f"{n_in:>5}x{n_out:<6} {t_nb*1e6:>10.1f}us {t_np*1e6:>10.1f}us "
              f"{t_np/t_nb:>8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
