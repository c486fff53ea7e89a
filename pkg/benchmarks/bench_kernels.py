"""Timing comparison of the convolution kernel backends.

Runs the three hot primitives (conv forward, input gradient, weight
gradient) on a few training-representative shapes under each available
backend and prints best-of-N wall times with the speedup of numba over
the NumPy fallback. The first numba call per function compiles it; a
warmup round keeps that out of the timings.

Usage: python benchmarks/bench_kernels.py [--repeat 7] [--dtype float32]
"""

import argparse
import time

import numpy as np

from martagan.autodiff import kernels

# (label, batch, c_in, c_out, side, kernel, stride, pad)
CASES = [
    ("disc stage0 32px", 64, 3, 16, 32, 4, 2, 1),
    ("disc stage1 16px", 64, 16, 32, 16, 4, 2, 1),
    ("disc deep 8px", 64, 64, 128, 8, 4, 2, 1),
    ("gen heavy 16px", 16, 128, 256, 16, 4, 2, 1),
]


def _inputs(case, dtype):
    _, n, ci, co, side, k, stride, pad = case
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, ci, side, side)).astype(dtype)
    w = rng.standard_normal((co, ci, k, k)).astype(dtype)
    ho = (side + 2 * pad - k) // stride + 1
    dout = rng.standard_normal((n, co, ho, ho)).astype(dtype)
    return x, w, dout, stride, pad, side, k


def _best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_case(case, backend, repeat, dtype):
    x, w, dout, stride, pad, side, k = _inputs(case, dtype)
    fwd, bwd_in, bwd_w = kernels.backend_functions(backend)
    calls = {
        "forward": lambda: fwd(x, w, stride, pad),
        "bwd_input": lambda: bwd_in(dout, w, stride, pad, side, side),
        "bwd_weights": lambda: bwd_w(dout, x, stride, pad, k),
    }
    for fn in calls.values():
        fn()  # warmup / JIT compile
    return {name: _best_of(fn, repeat) for name, fn in calls.items()}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7, help="timing repeats (best taken)")
    ap.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    args = ap.parse_args()

    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)}   dtype: {args.dtype}   best of {args.repeat}")
    header = f"{'case':<18} {'kernel':<12}"
    for b in backends:
        header += f" {b + ' [ms]':>12}"
    if "numba" in backends and "numpy" in backends:
        header += f" {'speedup':>9}"
    print(header)
    print("-" * len(header))

    for case in CASES:
        times = {b: bench_case(case, b, args.repeat, args.dtype) for b in backends}
        for kname in ("forward", "bwd_input", "bwd_weights"):
            row = f"{case[0]:<18} {kname:<12}"
            for b in backends:
                row += f" {times[b][kname] * 1e3:>12.3f}"
            if "numba" in backends and "numpy" in backends:
                row += f" {times['numpy'][kname] / times['numba'][kname]:>8.1f}x"
            print(row)


if __name__ == "__main__":
    main()
