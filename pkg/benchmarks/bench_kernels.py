"""Time the compiled kernels against their pure-NumPy fallbacks.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Sizes mirror the smoke experiments: 2048 embeddings of width 16 clustered
into 64 groups, AMI between 16-way and 64-way partitions of 2048 samples,
and the nearest-neighbor MI counts over the same embeddings.
"""
import argparse
import timeit

import numpy as np

from pcl._kernels import _pykernels

try:
    from pcl._kernels import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    x = rng.standard_normal((2048, 16))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    labels64 = rng.integers(0, 64, 2048)
    labels16 = np.arange(2048) % 16
    a_sums = np.bincount(labels16)
    b_sums = np.bincount(labels64)
    return [
        ("centroid_sums n=2048 d=16 k=64", lambda m: m.centroid_sums(x, labels64, 64)),
        ("expected_mutual_info 16x64, n=2048", lambda m: m.expected_mutual_info(a_sums, b_sums, 2048)),
        ("ross_counts n=2048 d=16 k=3", lambda m: m.ross_counts(x, labels16, 3)),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if _ckernels is None:
        print("compiled kernels are not built; only the fallback can be timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<38} {'python (ms)':>12} {'cython (ms)':>12} {'speedup':>8}")
    for name, fn in cases(rng):
        py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:<38} {py:12.2f} {'-':>12} {'-':>8}")
            continue
        cy = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<38} {py:12.2f} {cy:12.2f} {py / cy:7.1f}x")


if __name__ == "__main__":
    main()
