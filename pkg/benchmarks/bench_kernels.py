"""Time the numba kernels against their numpy fallbacks.

Both routes are called directly, so the ``MLS_NUMBA`` flag does not
matter here. Outputs are compared before timing.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]
"""
import argparse
import json
import timeit

import numpy as np

from mls import _imgkernels as ik
from mls.numkit import conv


def cases():
    rng = np.random.default_rng(0)
    x = rng.random((64, 32, 32, 16))
    _, cols = conv.conv2d(x, rng.random((3 * 3 * 16, 32)), np.zeros(32), 3, 2, 1)
    canvas = rng.random((64, 64, 3)).astype(np.float32)
    ang = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    xs, ys = 32 + 10 * np.cos(ang), 32 + 10 * np.sin(ang)
    color = np.array([0.9, 0.2, 0.1], dtype=np.float32)
    box = (5, 7, 41, 37)
    return {
        "im2col (64x32x32x16, k3 s2)": (
            lambda: conv._im2col_numba(x, 3, 3, 2, 1),
            lambda: conv._im2col_numpy(x, 3, 3, 2, 1)),
        "col2im (64x32x32x16, k3 s2)": (
            lambda: conv._col2im_numba(cols, x.shape, 3, 3, 2, 1),
            lambda: conv._col2im_numpy(cols, x.shape, 3, 3, 2, 1)),
        "fill_polygon (64x64, 12 gon)": (
            lambda: _filled(ik._fill_polygon_numba, canvas, xs, ys, color),
            lambda: _filled(ik._fill_polygon_numpy, canvas, xs, ys, color)),
        "resize_crop (64x64 -> 32x32)": (
            lambda: ik._resize_numba(canvas, box, 32, 32),
            lambda: ik._resize_numpy(canvas, box, 32, 32)),
    }


def _filled(fill, canvas, xs, ys, color):
    img = canvas.copy()
    fill(img, xs, ys, color)
    return img


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="write results here as well")
    args = ap.parse_args()
    rows = []
    print(f"{'kernel':32s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, (fast, slow) in cases().items():
        a, b = fast(), slow()  # also triggers compilation
        np.testing.assert_allclose(np.asarray(a), np.asarray(b), rtol=1e-5, atol=1e-6)
        tf = min(timeit.repeat(fast, number=1, repeat=args.repeat)) * 1e3
        ts = min(timeit.repeat(slow, number=1, repeat=args.repeat)) * 1e3
        rows.append({"kernel": name, "numba_ms": tf, "numpy_ms": ts, "speedup": ts / tf})
        print(f"{name:32s} {tf:10.3f} {ts:10.3f} {ts / tf:7.1f}x")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=1)


if __name__ == "__main__":
    main()
