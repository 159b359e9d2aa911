"""Time the ripmap query kernels on every available backend.

    python benchmarks/bench_kernels.py [--queries N] [--grid 64] [--repeat 5]

Reports the best-of-``repeat`` wall time for the forward interpolation and
the gradient scatter, plus the speedup of each backend over the pure-Python
fallback.
"""

import argparse
import time

import numpy as np

from ripnerf import kernels
from ripnerf import ripmap as rp


def best_time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--queries", type=int, default=20_000)
    ap.add_argument("--grid", type=int, default=64)
    ap.add_argument("--channels", type=int, default=8)
    ap.add_argument("--planes", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    layout = rp.RipmapLayout(args.grid, args.grid, args.channels)
    packed = rp.pack_pyramid(rng.normal(size=(args.planes, args.grid, args.grid,
                                              args.channels)).astype(np.float32))
    n_levels = np.log2(args.grid)
    coords = np.concatenate([rng.uniform(0, 1, (args.queries, args.planes, 2)),
                             rng.uniform(0, n_levels, (args.queries, args.planes, 2))],
                            axis=-1).astype(np.float32)
    upstream = rng.normal(size=(args.queries, args.planes, args.channels)).astype(np.float32)

    print(f"{args.queries} queries x {args.planes} planes, {args.grid}^2 x {args.channels} grids")
    print(f"{'backend':<8}{'forward ms':>12}{'backward ms':>13}{'fwd x':>8}{'bwd x':>8}")
    results = {}
    prev = kernels.backend_name()
    try:
        for name in kernels.available_backends():
            kernels.use_backend(name)
            fwd = best_time(lambda: rp.query_packed(packed, layout, coords), args.repeat)
            bwd = best_time(lambda: rp.query_packed_backward(layout, coords, upstream,
                                                             np.zeros_like(packed)),
                            args.repeat)
            results[name] = (fwd, bwd)
    finally:
        kernels.use_backend(prev)
    base_f, base_b = results["python"]
    for name, (f, b) in results.items():
        print(f"{name:<8}{f * 1e3:>12.2f}{b * 1e3:>13.2f}{base_f / f:>8.1f}{base_b / b:>8.1f}")
    if len(results) == 1:
        print("compiled backend not built; run `pip install -e . --no-build-isolation`")


if __name__ == "__main__":
    main()
