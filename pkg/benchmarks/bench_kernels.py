"""Compare the numba and numpy paths of the DTW and NCCF kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Checks both paths agree bit-for-bit before timing. The first numba call
(compilation, or a cache load) is excluded.
"""
import argparse
import time

import numpy as np

from segbert import _kernels as K


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    for n in (10, 40, 120):
        cost = K.pairwise_sq_dist(rng.normal(size=(n, 8)), rng.normal(size=(n + n // 3, 8)))
        D = K.dtw_accumulate(cost, use_numba=False)
        yield f"dtw accumulate {n}x{cost.shape[1]}", lambda c=cost, u=None: K.dtw_accumulate(c, use_numba=u)
        yield f"dtw backtrace  {n}x{cost.shape[1]}", lambda d=D, u=None: K.dtw_backtrace(d, use_numba=u)
    sr = 16000
    x = np.sin(2 * np.pi * 180.0 * np.arange(sr) / sr) + 0.1 * rng.normal(size=sr)
    W, hop = 640, 200
    frames = np.lib.stride_tricks.sliding_window_view(x, W)[::hop].copy()
    yield f"nccf {frames.shape[0]} frames", lambda f=frames, u=None: K.nccf(f, 40, 266, use_numba=u)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, run in cases(rng):
        ref, jit = run(u=False), run(u=True)
        if not np.array_equal(ref, jit):
            raise SystemExit(f"{name}: numba and numpy outputs differ")
        t_np = best_of(lambda: run(u=False), args.repeat)
        t_nb = best_of(lambda: run(u=True), args.repeat)
        print(f"{name:28s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
