"""Compare the numba and numpy convolution backends.

Times forward, input-gradient, and weight-gradient kernels over a few
desk-scale shapes and prints a table plus the speedup ratio. Run as:

    python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from invpaint.backend import _BACKENDS, set_backend
from invpaint.rng import RngStream

SHAPES = [
    # (batch, in_ch, out_ch, size, stride)
    (16, 1, 16, 16, 1),
    (16, 16, 16, 16, 1),
    (16, 16, 32, 16, 2),
    (32, 32, 32, 16, 1),
    (4, 32, 32, 8, 1),
]


def bench_one(fns, n, c, o, size, stride, repeats):
    fwd, bwd_in, bwd_w = fns
    rng = RngStream(0, "bench")
    pad = 1
    xp = rng.normal((n, c, size + 2 * pad, size + 2 * pad))
    w = rng.normal((o, c, 3, 3))
    y = fwd(xp, w, stride)
    gy = rng.normal(y.shape)
    out = []
    for fn, args in ((fwd, (xp, w, stride)),
                     (bwd_in, (gy, w, stride, xp.shape[2], xp.shape[3])),
                     (bwd_w, (xp, gy, stride, 3, 3))):
        fn(*args)  # warm up (jit compile)
        t0 = time.perf_counter()
        for _ in range(repeats):
            fn(*args)
        out.append((time.perf_counter() - t0) / repeats * 1e3)
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=30)
    args = ap.parse_args()
    names = sorted(_BACKENDS)
    if len(names) < 2:
        print("numba unavailable; only the numpy backend can be timed")
    print(f"{'shape (n,c,o,hw,s)':>22} {'kernel':>8} "
          + " ".join(f"{b:>10}" for b in names) + "   speedup")
    for shape in SHAPES:
        rows = {}
        for b in names:
            set_backend(b)
            rows[b] = bench_one(_BACKENDS[b], *shape, args.repeats)
        for ki, kname in enumerate(("fwd", "bwd_in", "bwd_w")):
            cells = " ".join(f"{rows[b][ki]:>8.3f}ms" for b in names)
            ratio = ""
            if len(names) == 2:
                ratio = f"  {rows[names[1]][ki] / rows[names[0]][ki]:6.2f}x"
            print(f"{str(shape):>22} {kname:>8} {cells}{ratio}")
    set_backend(None)


if __name__ == "__main__":
    main()
