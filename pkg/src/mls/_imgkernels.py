"""Pixel kernels: polygon fill and bilinear crop-resize (numba + numpy)."""
import numpy as np

from ._accel import njit, pick


@njit
def _fill_polygon_kernel(img, xs, ys, color):
    h, w, _ = img.shape
    n = xs.shape[0]
    x0 = max(int(np.floor(xs.min())), 0)
    x1 = min(int(np.ceil(xs.max())), w - 1)
    y0 = max(int(np.floor(ys.min())), 0)
    y1 = min(int(np.ceil(ys.max())), h - 1)
    for py in range(y0, y1 + 1):
        cy = py + 0.5
        for px in range(x0, x1 + 1):
            cx = px + 0.5
            inside = False
            j = n - 1
            for i in range(n):
                yi = ys[i]
                yj = ys[j]
                if (yi > cy) != (yj > cy):
                    xc = xs[i] + (cy - yi) * (xs[j] - xs[i]) / (yj - yi)
                    if cx < xc:
                        inside = not inside
                j = i
            if inside:
                for c in range(3):
                    img[py, px, c] = color[c]


def _fill_polygon_numba(img, xs, ys, color):
    _fill_polygon_kernel(img, np.ascontiguousarray(xs, dtype=np.float64),
                         np.ascontiguousarray(ys, dtype=np.float64),
                         np.ascontiguousarray(color, dtype=img.dtype))


def _fill_polygon_numpy(img, xs, ys, color):
    h, w, _ = img.shape
    x0 = max(int(np.floor(xs.min())), 0)
    x1 = min(int(np.ceil(xs.max())), w - 1)
    y0 = max(int(np.floor(ys.min())), 0)
    y1 = min(int(np.ceil(ys.max())), h - 1)
    if x1 < x0 or y1 < y0:
        return
    cy, cx = np.meshgrid(np.arange(y0, y1 + 1) + 0.5, np.arange(x0, x1 + 1) + 0.5, indexing="ij")
    inside = np.zeros(cy.shape, dtype=bool)
    n = xs.shape[0]
    j = n - 1
    for i in range(n):
        yi, yj, xi, xj = ys[i], ys[j], xs[i], xs[j]
        crosses = (yi > cy) != (yj > cy)
        if yj != yi:
            xc = xi + (cy - yi) * (xj - xi) / (yj - yi)
            inside ^= crosses & (cx < xc)
        j = i
    region = img[y0:y1 + 1, x0:x1 + 1]
    region[inside] = np.asarray(color, dtype=img.dtype)


@njit
def _resize_kernel(src, x, y, w, h, out):
    oh, ow, ch = out.shape
    sx = w / ow
    sy = h / oh
    for i in range(oh):
        fy = y + (i + 0.5) * sy - 0.5
        fy = min(max(fy, y), y + h - 1.0)
        iy = int(np.floor(fy))
        iy1 = min(iy + 1, y + h - 1)
        ay = fy - iy
        for j in range(ow):
            fx = x + (j + 0.5) * sx - 0.5
            fx = min(max(fx, x), x + w - 1.0)
            ix = int(np.floor(fx))
            ix1 = min(ix + 1, x + w - 1)
            ax = fx - ix
            for c in range(ch):
                top = src[iy, ix, c] * (1.0 - ax) + src[iy, ix1, c] * ax
                bot = src[iy1, ix, c] * (1.0 - ax) + src[iy1, ix1, c] * ax
                out[i, j, c] = top * (1.0 - ay) + bot * ay


def _resize_numba(src, box, oh, ow):
    x, y, w, h = (int(v) for v in box)
    out = np.empty((oh, ow, src.shape[2]), dtype=src.dtype)
    _resize_kernel(np.ascontiguousarray(src), x, y, w, h, out)
    return out


def _axis_weights(start, length, n_out):
    f = start + (np.arange(n_out) + 0.5) * (length / n_out) - 0.5
    f = np.clip(f, start, start + length - 1.0)
    i0 = np.floor(f).astype(np.int64)
    i1 = np.minimum(i0 + 1, start + length - 1)
    return i0, i1, f - i0


def _resize_numpy(src, box, oh, ow):
    x, y, w, h = (int(v) for v in box)
    iy0, iy1, ay = _axis_weights(y, h, oh)
    ix0, ix1, ax = _axis_weights(x, w, ow)
    ax = ax[None, :, None]
    ay = ay[:, None, None]
    top = src[iy0][:, ix0] * (1.0 - ax) + src[iy0][:, ix1] * ax
    bot = src[iy1][:, ix0] * (1.0 - ax) + src[iy1][:, ix1] * ax
    return (top * (1.0 - ay) + bot * ay).astype(src.dtype)


fill_polygon = pick(_fill_polygon_numba, _fill_polygon_numpy)
resize_crop = pick(_resize_numba, _resize_numpy)
