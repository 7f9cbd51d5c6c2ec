"""Benchmark the compiled patch kernels against the pure-NumPy fallback.

Loads both backend modules directly (bypassing the import-time selection)
so one process can time them side by side, checks their outputs are
bitwise identical, and prints per-size timings with the speedup.

    python3 benchmarks/bench_kernels.py --repeats 5
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from triad import _conv_np

try:
    from triad import _conv_cy
except ImportError:
    _conv_cy = None


def _time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def _bench_case(batch: int, channels: int, size: int, kernel: int,
                stride: int, repeats: int, rng: np.random.Generator):
    pad = kernel // 2
    xp = rng.normal(size=(batch, channels, size + 2 * pad,
                          size + 2 * pad))
    rows = []

    def run(impl):
        cols = impl.im2col(xp, kernel, stride)
        back = impl.col2im(cols, channels, kernel, stride,
                           xp.shape[2], xp.shape[3])
        return cols, back

    ref_cols, ref_back = run(_conv_np)
    t_np = _time(lambda: run(_conv_np), repeats)
    rows.append(("python", t_np, 1.0, True))
    if _conv_cy is not None:
        cy_cols, cy_back = run(_conv_cy)
        identical = (np.array_equal(ref_cols, cy_cols)
                     and np.array_equal(ref_back, cy_back))
        t_cy = _time(lambda: run(_conv_cy), repeats)
        rows.append(("cython", t_cy, t_np / t_cy, identical))
    return rows


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description=__doc__.splitlines()[0],
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--repeats", type=int, default=5,
                        help="timing repeats (best is reported)")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    if _conv_cy is None:
        print("compiled backend not built; timing the fallback only")
    rng = np.random.default_rng(args.seed)
    cases = [
        (32, 1, 32, 3, 2),
        (32, 8, 16, 3, 2),
        (32, 16, 8, 3, 2),
        (64, 16, 16, 3, 1),
        (8, 32, 32, 5, 2),
    ]
    print(f"{'case':<26} {'backend':<8} {'best':>10} {'speedup':>8}  match")
    ok = True
    for batch, channels, size, kernel, stride in cases:
        label = (f"B{batch} C{channels} {size}x{size} "
                 f"k{kernel} s{stride}")
        for backend, seconds, speedup, identical in _bench_case(
                batch, channels, size, kernel, stride, args.repeats, rng):
            ok = ok and identical
            print(f"{label:<26} {backend:<8} {seconds * 1e3:>8.2f}ms "
                  f"{speedup:>7.2f}x  {'yes' if identical else 'NO'}")
    if not ok:
        print("backend outputs differ")
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
