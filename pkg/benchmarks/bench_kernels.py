"""Time the compiled and numpy geometry kernels on identical inputs.

    python3 benchmarks/bench_kernels.py [--n 200000] [--repeat 5]

Prints one row per (kernel, backend) with the best wall time, throughput and
the max abs difference from the numpy result.
"""
import argparse
import time

import numpy as np

from dosnet import kernels
from dosnet.limits import semi_axis_grid


def _inputs(n, seed):
    rng = np.random.default_rng(seed)
    cx, cy = rng.normal(0, 5, (2, n))
    l = rng.uniform(0.2, 6.0, n)
    w = rng.uniform(0.2, 6.0, n)
    theta = rng.uniform(0, np.pi, n)
    px, py = rng.normal(0, 6, (2, n))
    return cx, cy, l, w, theta, px, py


def _best(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=200_000, help="ellipse/point pairs")
    ap.add_argument("--offsets", type=int, default=20, help="offsets for the min-area grid search")
    ap.add_argument("--resolution", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    args_pairs = _inputs(args.n, args.seed)
    rng = np.random.default_rng(args.seed + 1)
    u, v = rng.uniform(-5, 5, (2, args.offsets))
    grid = semi_axis_grid(args.resolution)
    cases = [
        ("mahalanobis", args.n, lambda b: kernels.mahalanobis(*args_pairs, backend=b)),
        ("ellipse_distance", args.n, lambda b: kernels.ellipse_distance(*args_pairs, backend=b)),
        ("min_area_grid", args.offsets, lambda b: kernels.min_area_grid(u, v, grid, backend=b)),
    ]
    print(f"{'kernel':<18} {'backend':<9} {'best_s':>9} {'items/s':>12} {'speedup':>8} {'max_diff':>9}")
    for name, n, fn in cases:
        ref_t, ref = _best(lambda: fn("python"), args.repeat)
        for backend in kernels.available_backends():
            t, out = (ref_t, ref) if backend == "python" else _best(lambda: fn(backend), args.repeat)
            diff = float(np.max(np.abs(out - ref)))
            print(f"{name:<18} {backend:<9} {t:9.4f} {n / t:12.3g} {ref_t / t:8.1f} {diff:9.2e}")


if __name__ == "__main__":
    main()
