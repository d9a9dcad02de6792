"""Compare the compiled and numpy convolution backends.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from lar_sirr import _pykernels

try:
    from lar_sirr import _ckernels
except ImportError:
    _ckernels = None

CASES = [
    ("3x3 on 64x64x3", (64, 64, 3), 3),
    ("3x3 on 256x256x3", (256, 256, 3), 3),
    ("11x11 on 128x128x3", (128, 128, 3), 11),
    ("25x25 on 128x128x1", (128, 128, 1), 25),
]


def run(repeat=5):
    rng = np.random.default_rng(0)
    rows = []
    for name, shape, k in CASES:
        padded = rng.random((shape[0] + k - 1, shape[1] + k - 1, shape[2]))
        kernel = rng.random((k, k))
        row = {"case": name}
        for label, mod in (("python", _pykernels), ("cython", _ckernels)):
            if mod is None:
                row[label] = None
                continue
            times = timeit.repeat(lambda: mod.convolve_padded(padded, kernel), number=3, repeat=repeat)
            row[label] = min(times) / 3
        if _ckernels is not None:
            a = _pykernels.convolve_padded(padded, kernel)
            b = _ckernels.convolve_padded(padded, kernel)
            row["identical"] = bool(np.array_equal(a, b))
        rows.append(row)
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    rows = run(args.repeat)
    print(f"{'case':<22}{'python ms':>12}{'cython ms':>12}{'speedup':>10}{'identical':>11}")
    for r in rows:
        py = r["python"] * 1e3
        if r["cython"] is None:
            print(f"{r['case']:<22}{py:>12.3f}{'n/a':>12}{'n/a':>10}{'n/a':>11}")
        else:
            cy = r["cython"] * 1e3
            print(f"{r['case']:<22}{py:>12.3f}{cy:>12.3f}{py / cy:>9.2f}x{str(r['identical']):>11}")


if __name__ == "__main__":
    main()
