"""Minimal dense numeric kernel: products, normalization, stable
sigmoid-family maps, SGD, tensor serialization and finite differences."""
from .core import (
    NORM_EPS,
    batch_norm,
    batch_norm_backward,
    l2_normalize_rows,
    l2_normalize_rows_backward,
    layer_norm,
    layer_norm_backward,
    log_sigmoid,
    logsumexp_rows,
    matmul,
    matmul_backward,
    relu,
    relu_backward,
    sigmoid,
    softmax_rows,
    softplus,
)
from .errors import DegenerateVectorError, ShapeError
from .gradcheck import numeric_grad, rel_error
from .optim import SGD, sgd_step
from .serialize import load_tensors, save_tensors

__all__ = [
    "NORM_EPS", "SGD", "DegenerateVectorError", "ShapeError", "batch_norm", "batch_norm_backward",
    "l2_normalize_rows", "l2_normalize_rows_backward", "layer_norm", "layer_norm_backward", "load_tensors", "log_sigmoid",
    "logsumexp_rows", "matmul", "matmul_backward", "numeric_grad", "rel_error", "relu",
    "relu_backward", "save_tensors", "sgd_step", "sigmoid", "softmax_rows", "softplus",
]
