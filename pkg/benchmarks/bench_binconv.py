"""Time the XNOR-popcount conv backends against the float im2col conv.

    python benchmarks/bench_binconv.py [--repeat 5] [--quick]

Each row is one layer shape; times are the best of ``--repeat`` runs.
All backends are checked against each other before timing.
"""

import argparse
import time

import numpy as np

from bireal import kernels
from bireal.conv import ConvGeometry, binconv2d, float_conv2d, pack_weight_rows
from bireal.tensor import sign_pack, unpack

# (batch, channels in, channels out, spatial, stride)
SHAPES = [
    (32, 16, 16, 14, 1),
    (32, 32, 32, 7, 1),
    (8, 64, 64, 28, 1),
    (8, 64, 128, 28, 2),
    (1, 256, 256, 14, 1),
    (1, 512, 512, 7, 1),
]


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="first three shapes only")
    args = ap.parse_args(argv)

    backends = ["numpy"] + (["cython"] if kernels.BACKEND == "cython" else [])
    if "cython" not in backends:
        print("compiled extension not built; timing the numpy backend only")
    rng = np.random.default_rng(0)
    head = f"{'shape (N,Ci,Co,HW,s)':<26}" + "".join(f"{b + ' ms':>12}" for b in backends) + f"{'float ms':>12}"
    if "cython" in backends:
        head += f"{'np/cy':>8}{'float/cy':>10}"
    print(head)
    for n, ci, co, hw, s in SHAPES[:3] if args.quick else SHAPES:
        g = ConvGeometry.square(ci, co, 3, s, 1)
        a = sign_pack(rng.standard_normal((n, ci, hw, hw)))
        w = sign_pack(rng.standard_normal(g.weight_shape))
        rows = pack_weight_rows(w)
        af, wf = unpack(a), unpack(w)
        outs = {b: binconv2d(a, w, g, backend=b, w_rows=rows) for b in backends}
        ref = float_conv2d(af, wf, g, pad_value=-1.0)
        for b, o in outs.items():
            if not np.array_equal(o, ref):
                raise SystemExit(f"backend {b} disagrees with the float reference on {(n, ci, co, hw, s)}")
        times = {b: best_of(lambda b=b: binconv2d(a, w, g, backend=b, w_rows=rows), args.repeat) for b in backends}
        t_float = best_of(lambda: float_conv2d(af, wf, g, pad_value=-1.0), args.repeat)
        line = f"{str((n, ci, co, hw, s)):<26}" + "".join(f"{1e3 * times[b]:>12.2f}" for b in backends)
        line += f"{1e3 * t_float:>12.2f}"
        if "cython" in backends:
            line += f"{times['numpy'] / times['cython']:>8.1f}{t_float / times['cython']:>10.1f}"
        print(line)


if __name__ == "__main__":
    main()
