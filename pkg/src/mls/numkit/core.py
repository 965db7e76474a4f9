"""Dense float kernels used by the encoder and every loss.

Matrices are plain 2-D ``numpy.ndarray`` in row-major (C) order. Each
differentiable op has a matching ``*_backward`` that maps the upstream
gradient to gradients of the inputs.
"""
import numpy as np

from .errors import DegenerateVectorError, ShapeError

NORM_EPS = 1e-12


def _as_matrix(a, name):
    a = np.asarray(a)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b):
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def matmul_backward(grad_out, a, b):
    """Gradients of ``a @ b`` w.r.t. ``a`` and ``b``."""
    return grad_out @ b.T, a.T @ grad_out


def l2_normalize_rows(a, eps=NORM_EPS):
    a = _as_matrix(a, "a")
    norms = np.sqrt(np.einsum("ij,ij->i", a, a))
    bad = np.flatnonzero(~(norms > eps))
    if bad.size:
        raise DegenerateVectorError(f"rows {bad[:8].tolist()} have norm <= {eps:g}")
    return a / norms[:, None]


def l2_normalize_rows_backward(grad_out, a, out=None):
    """Gradient of ``a / ||a||`` (row-wise) given the upstream gradient."""
    norms = np.sqrt(np.einsum("ij,ij->i", a, a))[:, None]
    if out is None:
        out = a / norms
    dot = np.einsum("ij,ij->i", out, grad_out)[:, None]
    return (grad_out - out * dot) / norms


# numerically stable scalar/elementwise maps; inputs may be scalars or arrays

def softplus(x):
    return np.logaddexp(0.0, x)


def log_sigmoid(x):
    return -softplus(-np.asarray(x))


def sigmoid(x):
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logsumexp_rows(x):
    m = x.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=1, keepdims=True)))[:, 0]


def softmax_rows(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, out):
    return grad_out * (out > 0)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Per-sample normalization over all non-batch axes with a
    per-channel (last axis) affine. Returns ``(y, (xhat, rstd))``."""
    axes = tuple(range(1, x.ndim))
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd)


def layer_norm_backward(grad_out, gamma, saved):
    xhat, rstd = saved
    axes = tuple(range(1, xhat.ndim))
    red = tuple(range(xhat.ndim - 1))
    dgamma = (grad_out * xhat).sum(axis=red)
    dbeta = grad_out.sum(axis=red)
    dxhat = grad_out * gamma
    m1 = dxhat.mean(axis=axes, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
    return (dxhat - m1 - xhat * m2) * rstd, dgamma, dbeta


def batch_norm(x, eps=1e-5, mean=None, var=None):
    """Normalize columns of a (B, F) matrix. Batch statistics unless
    ``mean``/``var`` are given. Returns ``(xhat, saved, batch_mean, batch_var)``."""
    if mean is None:
        mu = x.mean(axis=0)
        v = x.var(axis=0)
    else:
        mu, v = mean, var
    rstd = 1.0 / np.sqrt(v + eps)
    xhat = (x - mu) * rstd
    return xhat, (xhat, rstd), mu, v


def batch_norm_backward(grad_out, saved):
    """Backward of batch-statistics normalization (no affine)."""
    xhat, rstd = saved
    m1 = grad_out.mean(axis=0)
    m2 = (grad_out * xhat).mean(axis=0)
    return (grad_out - m1 - xhat * m2) * rstd
