"""Time the numba kernels against their pure-numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20]

Both variants are called directly, so the MIXSUP_DISABLE_NUMBA flag does not
matter here; it only selects which one the public wrappers dispatch to.
Outputs are compared before timing.
"""

import argparse
import timeit

import numpy as np

from mixsup import kernels as K


def _cases(rng):
    x = rng.random((4, 16, 32, 32), dtype=np.float32)
    shape = (4, 16, 32, 32)
    cols = K.im2col(x, 3, 1, 1)
    small = rng.random((4, 32, 16, 16), dtype=np.float32)
    big = rng.random((4, 32, 64, 64), dtype=np.float32)
    p = rng.random((96, 96))
    _, ra, ca, tr = K.m2b_forward(p)
    g = rng.random((96, 96))
    return [
        ("im2col 4x16x32x32 k3", lambda: K._im2col_numpy(x, 3, 1, 1), lambda: K._im2col_numba(x, 3, 1, 1)),
        ("col2im 4x16x32x32 k3", lambda: K._col2im_numpy(cols, shape, 3, 1, 1),
         lambda: K._col2im_numba(cols, shape, 3, 1, 1)),
        ("resize 16->64", lambda: K._resize_numpy(small, 64, 64), lambda: K._resize_numba(small, 64, 64)),
        ("resize backward 64->16", lambda: K._resize_backward_numpy(big, 16, 16),
         lambda: K._resize_backward_numba(big, 16, 16)),
        ("m2b forward 96x96", lambda: K._m2b_forward_numpy(p)[0], lambda: K._m2b_forward_numba(p)[0]),
        ("m2b backward 96x96", lambda: K._m2b_backward_numpy(g, ra, ca, tr),
         lambda: K._m2b_backward_numba(g, ra, ca, tr)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    print(f"{'kernel':<26}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, f_np, f_nb in _cases(np.random.default_rng(0)):
        np.testing.assert_allclose(f_nb(), f_np(), rtol=1e-5, atol=1e-6)  # also warms the JIT
        t_np = min(timeit.repeat(f_np, number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(f_nb, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<26}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
