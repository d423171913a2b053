"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Shapes follow the P-ResNet stem and a 16-slice batch at 128 px.
"""
import argparse
import json
import timeit

import numpy as np

from adbench.tensor import kernels

CASES = [
    # name, (N, C, H, W), kernel, stride
    ("stem 7x7/2", (16, 1, 134, 134), 7, 2),
    ("block 3x3/1", (16, 16, 34, 34), 3, 1),
    ("block 3x3/2", (16, 32, 34, 34), 3, 2),
]


def bench_backend(k, x, ksize, stride, repeat):
    n, c, h, w = x.shape
    cols = k.im2col(x, ksize, ksize, stride)
    g = np.ones_like(cols)
    pooled, idx = k.maxpool_forward(x, 3, 2)
    gp = np.ones_like(pooled)
    ops = {
        "im2col": lambda: k.im2col(x, ksize, ksize, stride),
        "col2im": lambda: k.col2im(g, c, h, w, ksize, ksize, stride),
        "maxpool fwd": lambda: k.maxpool_forward(x, 3, 2),
        "maxpool bwd": lambda: k.maxpool_backward(gp, idx, h, w),
    }
    return {name: min(timeit.repeat(fn, number=1, repeat=repeat)) for name, fn in ops.items()}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", help="also write the timings here")
    args = p.parse_args(argv)

    backends = ["numpy"] + (["cython"] if kernels.BACKEND == "cython" else [])
    if len(backends) == 1:
        print("compiled extension not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    rows = []
    for name, shape, ksize, stride in CASES:
        x = rng.standard_normal(shape).astype(np.float32)
        times = {b: bench_backend(kernels.get_backend(b), x, ksize, stride, args.repeat) for b in backends}
        for op in times["numpy"]:
            row = {"case": name, "op": op, **{b: times[b][op] for b in backends}}
            if "cython" in row:
                row["speedup"] = row["numpy"] / row["cython"]
            rows.append(row)

    head = f"{'case':14s} {'op':12s} {'numpy ms':>10s}" + (f" {'cython ms':>10s} {'speedup':>8s}" if "cython" in backends else "")
    print(head)
    for r in rows:
        line = f"{r['case']:14s} {r['op']:12s} {r['numpy'] * 1e3:10.2f}"
        if "cython" in r:
            line += f" {r['cython'] * 1e3:10.2f} {r['speedup']:7.1f}x"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
            fh.write("\n")


if __name__ == "__main__":
    main()
