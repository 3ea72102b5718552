"""Time the compiled and numpy im2col/col2im kernels on U-Net-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from hidream.tensor import _kernels_py

try:
    from hidream.tensor import _ckernels
except ImportError:
    _ckernels = None

SHAPES = [(16, 16, 32, 32), (16, 24, 16, 16), (16, 48, 4, 4), (16, 4, 64, 64)]


def bench(fn, *args, repeat):
    fn(*args)
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation` first")
        return
    rng = np.random.default_rng(0)
    print(f"{'shape':>20} {'kernel':>7} {'python ms':>10} {'cython ms':>10} {'speedup':>8} {'equal':>6}")
    for shape in SHAPES:
        x = rng.standard_normal(shape).astype(np.float32)
        cols_py = _kernels_py.im2col3x3(x)
        cols_c = _ckernels.im2col3x3(x)
        tp = bench(_kernels_py.im2col3x3, x, repeat=args.repeat)
        tc = bench(_ckernels.im2col3x3, x, repeat=args.repeat)
        same = np.array_equal(cols_py, cols_c)
        print(f"{str(shape):>20} {'im2col':>7} {tp * 1e3:10.3f} {tc * 1e3:10.3f} {tp / tc:8.2f} {str(same):>6}")
        h, w = shape[2:]
        tp = bench(_kernels_py.col2im3x3, cols_py, h, w, repeat=args.repeat)
        tc = bench(_ckernels.col2im3x3, cols_py, h, w, repeat=args.repeat)
        same = np.array_equal(_kernels_py.col2im3x3(cols_py, h, w), _ckernels.col2im3x3(cols_py, h, w))
        print(f"{str(shape):>20} {'col2im':>7} {tp * 1e3:10.3f} {tc * 1e3:10.3f} {tp / tc:8.2f} {str(same):>6}")


if __name__ == "__main__":
    main()
