"""Compare the compiled and numpy im2col/col2im kernels, plus one full conv forward/backward.

Run: python3 benchmarks/bench_kernels.py [--reps N]
Prints one line per case with the median time of each backend and the speedup.
"""

import argparse
import statistics
import time

import numpy as np

from gfnet.numcore import _kernels_py

try:
    from gfnet.numcore import _ckernels
except ImportError:  # extension not built
    _ckernels = None

# (batch, channels, padded side, kernel, stride): shapes met by the desk-scale encoder
CASES = [
    (1, 3, 18, 3, 1),
    (64, 3, 18, 3, 1),
    (64, 16, 18, 3, 2),
    (64, 32, 10, 3, 2),
    (250, 64, 6, 3, 2),
]


def median_time(fn, reps):
    fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--reps", type=int, default=30)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    print(f"{'case':<28}{'kernel':<8}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for n, c, side, k, s in CASES:
        xp = rng.standard_normal((n, c, side, side)).astype(np.float32)
        cols = _kernels_py.im2col(xp, k, k, s)
        label = f"N={n} C={c} {side}x{side} k{k} s{s}"
        for name, args_ in (("im2col", (xp, k, k, s)), ("col2im", (cols, side, side, s))):
            py = median_time(lambda: getattr(_kernels_py, name)(*args_), args.reps)
            if _ckernels is not None:
                cy = median_time(lambda: getattr(_ckernels, name)(*args_), args.reps)
                same = np.array_equal(getattr(_kernels_py, name)(*args_), getattr(_ckernels, name)(*args_))
                tail = f"{cy * 1e3:>11.3f}{py / cy:>8.2f}x" + ("" if same else "  MISMATCH")
            else:
                tail = f"{'-':>11}{'-':>9}"
            print(f"{label:<28}{name:<8}{py * 1e3:>10.3f}{tail}")


if __name__ == "__main__":
    main()
