"""Compare the compiled box kernels with the NumPy fallback.

    python3 benchmarks/bench_boxops.py [--repeat 20]

Both backends are called directly (not through ``itfa.boxops``) so one process
can time both. Also checks that the outputs agree.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from itfa import _boxops_py

try:
    from itfa import _boxops
except ImportError:
    _boxops = None


def random_boxes(rng, n, size=64.0):
    xy = rng.uniform(0, size * 0.8, (n, 2))
    wh = rng.uniform(4, size * 0.4, (n, 2))
    return np.ascontiguousarray(np.hstack([xy, xy + wh]))


def cases(rng):
    a, b = random_boxes(rng, 300), random_boxes(rng, 50)
    props = random_boxes(rng, 2000)
    order = np.argsort(-rng.random(len(props)), kind="stable").astype(np.int64)
    dets = random_boxes(rng, 100)
    ious = np.ascontiguousarray(_boxops_py.iou_matrix(dets, random_boxes(rng, 20)))
    tp = (rng.random(500) < 0.4).astype(np.uint8)
    return {
        "iou_matrix 300x50": lambda m: m.iou_matrix(a, b),
        "nms 2000 boxes": lambda m: m.nms_ordered(props, order, 0.7),
        "greedy_match 100x20": lambda m: m.greedy_match(ious, 0.5),
        "ap101 500 dets": lambda m: m.ap101(tp, 200),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if _boxops is None:
        print("compiled extension not built; only the fallback can be timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(_boxops_py), number=1, repeat=args.repeat)) * 1e3
        if _boxops is None:
            print(f"{name:<22}{t_py:>12.3f}{'-':>12}{'-':>10}")
            continue
        same = np.allclose(np.asarray(fn(_boxops_py)), np.asarray(fn(_boxops)), atol=1e-12)
        t_cy = min(timeit.repeat(lambda: fn(_boxops), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<22}{t_py:>12.3f}{t_cy:>12.3f}{t_py / t_cy:>9.1f}x" + ("" if same else "  MISMATCH"))


if __name__ == "__main__":
    main()
