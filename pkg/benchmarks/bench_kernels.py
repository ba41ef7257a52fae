"""Compare the numba kernels against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeats 50]

Each kernel is called once untimed on each path (JIT warmup), then timed over
``--repeats`` calls; the median is reported in microseconds.
"""
import argparse
import statistics
import time

import numpy as np

from dctadamw import _kernels


def _median_us(fn, args, repeats):
    fn(*args)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append((time.perf_counter() - t0) * 1e6)
    return statistics.median(times)


def cases(rng):
    S = rng.standard_normal((1024, 1024))
    scores = rng.standard_normal(2048)
    prev = rng.permutation(1024)[:256].astype(np.int64)
    crt = rng.permutation(1024)[:256].astype(np.int64)
    m = rng.standard_normal((1024, 256))
    flat = rng.standard_normal(1024 * 256)
    codes, scales, zeros = _kernels.NUMPY_KERNELS.quantize_groups(flat, 256)
    return {
        "axis_scores l1 (1024x1024)": ("axis_scores", (S, 1, 0)),
        "axis_scores l2 (1024x1024)": ("axis_scores", (S, 2, 0)),
        "rank_top (2048 -> 256)": ("rank_top", (scores, 256)),
        "match_matrix (r=256)": ("match_matrix", (prev, crt)),
        "reindex_cols (1024x256)": ("reindex_cols", (m, prev, crt)),
        "quantize_groups (262144)": ("quantize_groups", (flat, 256)),
        "dequantize_groups (262144)": ("dequantize_groups", (codes, scales, zeros, 256)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if _kernels.NUMBA_KERNELS is None:
        raise SystemExit("numba is not installed; install the 'jit' extra to compare")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<30}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for label, (name, fargs) in cases(rng).items():
        t_np = _median_us(getattr(_kernels.NUMPY_KERNELS, name), fargs, args.repeats)
        t_nb = _median_us(getattr(_kernels.NUMBA_KERNELS, name), fargs, args.repeats)
        print(f"{label:<30}{t_np:>12.1f}{t_nb:>12.1f}{t_np / t_nb:>9.2f}x")


if __name__ == "__main__":
    main()
