"""Depthwise-conv kernels: numba vs the pure-numpy fallback.

Usage: python benchmarks/bench_kernels.py [--reps 5] [--kernels 3 7 11] [--csv out.csv]

Times forward, input-gradient and kernel-gradient passes of the raw kernels
for both backends on feature maps shaped like the model's stages, reporting
the median. Numba compilation happens in an untimed warm-up call.
"""

import argparse
import statistics
import sys
import time

import numpy as np

from conv2former import _kernels

SHAPES = [(8, 64, 56, 56), (8, 128, 28, 28), (8, 256, 14, 14)]


def timed(fn, reps):
    fn()
    out = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        out.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(out)


def run(shapes, kernels, reps, dtype):
    rng = np.random.default_rng(0)
    rows = []
    for shape in shapes:
        x = rng.standard_normal(shape).astype(dtype)
        g = rng.standard_normal(shape).astype(dtype)
        for k in kernels:
            w = rng.standard_normal((shape[1], k, k)).astype(dtype)
            passes = {
                "forward": (_kernels._dw_forward_np, _kernels._dw_forward_nb, (x, w)),
                "grad_input": (_kernels._dw_grad_input_np, _kernels._dw_grad_input_nb, (g, w)),
                "grad_kernel": (_kernels._dw_grad_kernel_np, _kernels._dw_grad_kernel_nb, (x, g, k)),
            }
            for name, (np_fn, nb_fn, args) in passes.items():
                t_np = timed(lambda: np_fn(*args), reps)
                t_nb = timed(lambda: nb_fn(*args), reps)
                rows.append(("x".join(map(str, shape)), k, name, t_np, t_nb))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--kernels", type=int, nargs="+", default=[3, 7, 11])
    ap.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        print("numba is not installed; nothing to compare", file=sys.stderr)
        return 1
    rows = run(SHAPES, args.kernels, args.reps, np.float32 if args.dtype == "f32" else np.float64)
    lines = ["shape,kernel,pass,numpy_ms,numba_ms,speedup"]
    lines += [f"{s},{k},{p},{a:.3f},{b:.3f},{a / b:.2f}" for s, k, p, a, b in rows]
    text = "\n".join(lines) + "\n"
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(text)
    print(text, end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
