"""Compare the compiled and numpy integer convolution kernels.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from tinytrain import kernels
from tinytrain.kernels import _pykernels as py

# (name, N, Cin, H, Cout, kernel, stride, groups): inverted-residual layer shapes
CASES = [
    ("pw1 16->96 @32", 1, 16, 32, 96, 1, 1, 1),
    ("dw 96 k3 s2 @32", 1, 96, 32, 96, 3, 2, 96),
    ("pw2 96->24 @16", 1, 96, 16, 24, 1, 1, 1),
    ("conv 3->16 k3 @64", 1, 3, 64, 16, 3, 2, 1),
]


def _inputs(rng, n, cin, h, cout, k, stride, groups):
    x = rng.integers(-128, 128, (n, cin, h, h)).astype(np.int8)
    w = rng.integers(-127, 128, (cout, cin // groups, k, k)).astype(np.int8)
    b = rng.integers(-1000, 1000, cout).astype(np.int32)
    m = rng.uniform(1e-4, 1e-2, cout)
    pad = (k // 2, k // 2)
    y = py.conv2d_int8(x, 0, w, b, m, 0, -128, 127, (stride, stride), pad, groups)
    g = rng.integers(-127, 128, y.shape).astype(np.int8)
    return x, w, b, m, g, pad


def _time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = {"python": py}
    if kernels.compiled_backend is not None:
        impls["cython"] = kernels.compiled_backend
    else:
        print("compiled extension not available; timing the numpy backend only")
    rng = np.random.default_rng(0)
    print(f"{'case':<22}{'kernel':<8}" + "".join(f"{k + ' ms':>12}" for k in impls)
          + ("   speedup" if len(impls) == 2 else ""))
    for name, n, cin, h, cout, k, s, grp in CASES:
        x, w, b, m, g, pad = _inputs(rng, n, cin, h, cout, k, s, grp)
        st = (s, s)
        ops = {
            "fwd": lambda im: im.conv2d_int8(x, 3, w, b, m, 0, -128, 127, st, pad, grp),
            "dgrad": lambda im: im.conv2d_input_grad_int(g, w, (h, h), st, pad, grp),
            "wgrad": lambda im: im.conv2d_weight_grad_int(g, x, 3, (k, k), st, pad, grp),
        }
        for op, fn in ops.items():
            outs = {key: fn(im) for key, im in impls.items()}
            ref = outs["python"]
            assert all(np.array_equal(o, ref) for o in outs.values()), f"{name} {op} mismatch"
            ms = {key: _time(lambda im=im: fn(im), args.repeat) for key, im in impls.items()}
            line = f"{name:<22}{op:<8}" + "".join(f"{ms[key]:>12.3f}" for key in impls)
            if len(impls) == 2:
                line += f"{ms['python'] / ms['cython']:>9.2f}x"
            print(line)


if __name__ == "__main__":
    main()
