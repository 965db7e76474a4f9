"""Strided 2-D convolution over NHWC tensors via im2col + BLAS matmul.

Column layout is ``(kh, kw, cin)`` fastest-last, so a weight matrix of
shape ``(kh*kw*cin, cout)`` multiplies the columns directly.
"""
import numpy as np

from .._accel import njit, pick
from .errors import ShapeError


def out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _im2col_numpy(x, kh, kw, stride, pad):
    b, h, w, c = x.shape
    ho, wo = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((b, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(b * ho * wo, kh * kw * c)


def _col2im_numpy(cols, shape, kh, kw, stride, pad):
    b, h, w, c = shape
    ho, wo = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    cols = cols.reshape(b, ho, wo, kh, kw, c)
    xp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += cols[:, :, :, i, j, :]
    return xp[:, pad:pad + h, pad:pad + w, :]


@njit
def _im2col_kernel(x, kh, kw, stride, pad, cols):
    b, h, w, c = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    row = 0
    for n in range(b):
        for oy in range(ho):
            for ox in range(wo):
                col = 0
                for i in range(kh):
                    y = oy * stride + i - pad
                    for j in range(kw):
                        xx = ox * stride + j - pad
                        if 0 <= y < h and 0 <= xx < w:
                            for ch in range(c):
                                cols[row, col + ch] = x[n, y, xx, ch]
                        else:
                            for ch in range(c):
                                cols[row, col + ch] = 0.0
                        col += c
                row += 1


@njit
def _col2im_kernel(cols, kh, kw, stride, pad, out):
    b, h, w, c = out.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    row = 0
    for n in range(b):
        for oy in range(ho):
            for ox in range(wo):
                col = 0
                for i in range(kh):
                    y = oy * stride + i - pad
                    for j in range(kw):
                        xx = ox * stride + j - pad
                        if 0 <= y < h and 0 <= xx < w:
                            for ch in range(c):
                                out[n, y, xx, ch] += cols[row, col + ch]
                        col += c
                row += 1


def _im2col_numba(x, kh, kw, stride, pad):
    b, h, w, c = x.shape
    ho, wo = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    cols = np.empty((b * ho * wo, kh * kw * c), dtype=x.dtype)
    _im2col_kernel(np.ascontiguousarray(x), kh, kw, stride, pad, cols)
    return cols


def _col2im_numba(cols, shape, kh, kw, stride, pad):
    out = np.zeros(shape, dtype=cols.dtype)
    _col2im_kernel(np.ascontiguousarray(cols), kh, kw, stride, pad, out)
    return out


im2col = pick(_im2col_numba, _im2col_numpy)
col2im = pick(_col2im_numba, _col2im_numpy)


def conv2d(x, weight, bias, k, stride, pad):
    """Forward pass. Returns ``(out NHWC, cols)``; ``cols`` feeds the backward."""
    b, h, w, c = x.shape
    if weight.shape[0] != k * k * c:
        raise ShapeError(f"weight rows {weight.shape[0]} != k*k*cin = {k * k * c}")
    ho, wo = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    cols = im2col(x, k, k, stride, pad)
    out = cols @ weight + bias
    return out.reshape(b, ho, wo, weight.shape[1]), cols


def conv2d_backward(grad_out, x_shape, cols, weight, k, stride, pad, need_input_grad=True):
    """Returns ``(grad_x or None, grad_weight, grad_bias)``."""
    cout = weight.shape[1]
    g = grad_out.reshape(-1, cout)
    gw = cols.T @ g
    gb = g.sum(axis=0)
    gx = None
    if need_input_grad:
        gx = col2im(g @ weight.T, x_shape, k, k, stride, pad)
    return gx, gw, gb
