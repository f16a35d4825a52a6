"""Compare the compiled and numpy kernel backends over a few convolution shapes.

Usage: python3 benchmarks/bench_kernels.py [--repeats N] [--steps N]
"""
import argparse
import json

from branchgate.arch import PRESETS
from branchgate.bench import bench_kernels, bench_steps

SHAPES = [
    # (N, C, H, W), cout, ksize, stride, pad
    ((32, 16, 16, 16), 16, 3, 1, 1),
    ((64, 8, 32, 32), 8, 3, 1, 1),
    ((32, 32, 16, 16), 64, 1, 2, 0),
]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--steps", type=int, default=5)
    args = parser.parse_args()
    for shape, cout, k, stride, pad in SHAPES:
        row = bench_kernels(shape, cout, k, stride, pad, args.repeats)
        row.update(cout=cout, ksize=k, stride=stride, pad=pad)
        print(json.dumps(row, sort_keys=True))
    print(json.dumps({"steps": bench_steps(PRESETS["toy-{11,2,4}"], 64, args.steps)}, sort_keys=True))


if __name__ == "__main__":
    main()
