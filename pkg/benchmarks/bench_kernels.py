"""Compare the numba and numpy kernel implementations.

    python3 benchmarks/bench_kernels.py [--n 1000000] [--repeat 5]

Prints one row per kernel with best-of-N timings and the speedup. The first
numba call (JIT compile) is excluded from timing.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from pilotrt._kernels import IMPLS, sort_changes


def make_inputs(n: int, seed: int = 0) -> dict[str, tuple]:
    rng = np.random.default_rng(seed)
    start = rng.uniform(0, 1000, n)
    end = start + rng.exponential(50, n)
    weight = rng.integers(1, 57, n).astype(np.float64)
    times = np.concatenate([start, end])
    deltas = np.concatenate([np.ones(n, np.int64), -np.ones(n, np.int64)])
    times, deltas = sort_changes(times, deltas)
    nodes = max(1, n // 100)
    free_c = np.zeros(nodes, np.int64)
    free_g = np.zeros(nodes, np.int64)
    free_c[-1], free_g[-1] = 56, 8  # worst case: only the last node fits
    return {
        "busy_area": (start, end, weight, 100.0, 900.0),
        "step_series": (times, deltas),
        "bucket_counts": (start, 0.0, 1.0, 1000),
        "first_fit": (free_c, free_g, 4, 1),
    }


def bench(n: int, repeat: int) -> list[tuple[str, dict[str, float]]]:
    inputs = make_inputs(n)
    rows = []
    for kernel, args in inputs.items():
        timings = {}
        for impl, table in IMPLS.items():
            fn = table[kernel]
            fn(*args)  # warm-up / compile
            timings[impl] = min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))
        rows.append((kernel, timings))
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    impls = list(IMPLS)
    print(f"n={args.n} repeat={args.repeat} impls={','.join(impls)}")
    print(f"{'kernel':<14}" + "".join(f"{i + ' [ms]':>14}" for i in impls) + f"{'speedup':>10}")
    for kernel, t in bench(args.n, args.repeat):
        cells = "".join(f"{t[i] * 1e3:>14.3f}" for i in impls)
        speed = f"{t['numpy'] / t['numba']:>10.2f}" if "numba" in t else f"{'-':>10}"
        print(f"{kernel:<14}{cells}{speed}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
