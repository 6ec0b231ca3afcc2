"""Compiled vs pure-Python kernels on synthetic inputs.

    python3 benchmarks/bench_kernels.py [--events N] [--repeat R]
"""

import argparse
import time

import numpy as np

from spikegait._backend import get_kernels, has_compiled


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--events", type=int, default=200_000)
    ap.add_argument("--frames", type=int, default=64)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    H = W = args.size
    n = args.events
    t = np.sort(rng.integers(0, 1_000_000, n)).astype(np.int64)
    x = rng.integers(0, W, n).astype(np.int64)
    y = rng.integers(0, H, n).astype(np.int64)
    p = rng.choice(np.array([-1, 1], dtype=np.int8), n)

    times = np.arange(args.frames, dtype=np.float64) * 20_000.0
    logv = np.cumsum(rng.normal(0, 0.3, (args.frames, H, W)), axis=0)

    backends = ["python"] + (["cython"] if has_compiled() else [])
    results = {}
    for name in backends:
        k = get_kernels(name)
        results[name] = (
            best_of(lambda: k.voxel_deposit(x, y, t, p, 0, 1_000_000, 8, H, W), args.repeat),
            best_of(lambda: k.threshold_crossings(logv, times, 0.2, 100.0), args.repeat),
        )
    print(f"{'backend':8s} {'voxel_deposit':>14s} {'threshold_crossings':>20s}")
    for name, (a, b) in results.items():
        print(f"{name:8s} {a * 1e3:12.2f}ms {b * 1e3:18.2f}ms")
    if "cython" in results:
        py, cy = results["python"], results["cython"]
        print(f"speed-up  {py[0] / cy[0]:12.1f}x {py[1] / cy[1]:18.1f}x")
    else:
        print("compiled extension not built; only the pure-Python kernels were timed")


if __name__ == "__main__":
    main()
