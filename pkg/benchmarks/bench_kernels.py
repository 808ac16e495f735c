"""Time the numba and numpy deformable-conv kernels side by side.

Usage: python3 benchmarks/bench_kernels.py [--channels C] [--size S] [--repeat R]

Also checks that both backends agree before timing them.
"""

import argparse
import timeit

import numpy as np

from stsn import kernels


def make_case(channels, size, seed=0):
    rng = np.random.default_rng(seed)
    ky, kx = np.meshgrid(np.arange(3.0), np.arange(3.0), indexing="ij")
    grid_y, grid_x = ky.ravel(), kx.ravel()
    x = rng.standard_normal((channels, size, size))
    offsets = rng.uniform(-2, 2, (2 * grid_y.size, size, size))
    gcols = rng.standard_normal((channels * grid_y.size, size * size))
    return x, offsets, grid_y, grid_x, gcols


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    x, off, gy, gx, gcols = make_case(args.channels, args.size)
    H = W = args.size
    backends = {"numpy": kernels.numpy_kernels}
    if kernels.numba_kernels is not None:
        backends["numba"] = kernels.numba_kernels
    else:
        print("numba unavailable; timing numpy only")

    results = {}
    for name, (im2col, col2im, offgrad) in backends.items():
        calls = {
            "im2col": lambda: im2col(x, off, gy, gx, 1),
            "col2im": lambda: col2im(gcols, off, gy, gx, 1, H, W),
            "offset_grad": lambda: offgrad(gcols, x, off, gy, gx, 1),
        }
        results[name] = {}
        for op, fn in calls.items():
            out = fn()  # warm-up (and JIT compile)
            results[name][op] = (min(timeit.repeat(fn, number=1, repeat=args.repeat)), out)

    print(f"C={args.channels} {args.size}x{args.size}, 3x3 taps, best of {args.repeat}")
    print(f"{'kernel':<12}" + "".join(f"{n:>12}" for n in backends) + ("     speedup" if len(backends) == 2 else ""))
    for op in ("im2col", "col2im", "offset_grad"):
        row = f"{op:<12}" + "".join(f"{results[n][op][0] * 1e3:>10.3f}ms" for n in backends)
        if len(backends) == 2:
            a, b = results["numpy"][op], results["numba"][op]
            err = float(np.max(np.abs(a[1] - b[1])))
            row += f"{a[0] / b[0]:>11.1f}x  (max diff {err:.1e})"
        print(row)


if __name__ == "__main__":
    main()
