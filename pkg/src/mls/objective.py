"""Pseudo-labels and every loss: InfoNCE, multi-label BCE, BCE-pos,
kNN-softmax, and their weighted combination.

Each loss returns ``(value, grad)`` where ``grad`` is taken w.r.t. the
differentiable input (query embeddings or logits). Batch reduction is
the mean over rows.
"""
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .numkit import (l2_normalize_rows, l2_normalize_rows_backward, logsumexp_rows,
                     sigmoid, softmax_rows, softplus)

VARIANTS = ("mls_bce", "bce_pos", "knn_softmax", "infonce_only")
DICTIONARIES = ("both", "qg_only", "qz_only")


@dataclass(frozen=True)
class ObjectiveConfig:
    tau: float = 0.2
    k: int = 8
    lambda_: float = 0.5
    variant: str = "mls_bce"
    dictionaries: str = "both"
    symmetrize: bool = False
    tau_ml: float = None  # BCE temperature override; shares tau when None

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.tau_ml is not None and not self.tau_ml > 0:
            raise ConfigError("tau_ml must be positive")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.lambda_ < 0:
            raise ConfigError("lambda must be >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.dictionaries not in DICTIONARIES:
            raise ConfigError(f"unknown dictionaries mode {self.dictionaries!r}")

    @property
    def ml_temperature(self):
        return self.tau if self.tau_ml is None else self.tau_ml

    @property
    def uses_ml(self):
        return self.variant != "infonce_only" and self.lambda_ != 0

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown objective keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LossBreakdown:
    nce: float
    ml: float
    total: float
    lambda_: float


def is_topk(scores, k):
    """Binary mask with the ``k`` largest scores per row set to 1.

    Ties go to the lower slot index (stable sort on negated scores).
    """
    scores = np.asarray(scores)
    d = scores.shape[1]
    if not 1 <= k < d:
        raise ConfigError(f"k must satisfy 1 <= k < D={d}, got {k}")
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    y = np.zeros(scores.shape, dtype=scores.dtype)
    np.put_along_axis(y, order, 1, axis=1)
    return y


def infonce(q, k_pos, negatives, tau):
    """Mean InfoNCE over rows; gradient flows to ``q`` only."""
    b = q.shape[0]
    l_pos = np.einsum("ij,ij->i", q, k_pos)[:, None]
    logits = np.concatenate([l_pos, q @ negatives.T], axis=1) / tau
    lse = logsumexp_rows(logits)
    loss = float(np.mean(lse - logits[:, 0]))
    dlogits = softmax_rows(logits)
    dlogits[:, 0] -= 1.0
    dlogits /= b * tau
    dq = dlogits[:, :1] * k_pos + dlogits[:, 1:] @ negatives
    return loss, dq


def mls_bce(p, y, tau):
    """Multi-label BCE over all D pseudo-classes, via softplus."""
    b, d = p.shape
    x = p / tau
    per = y * softplus(-x) + (1.0 - y) * softplus(x)
    loss = float(per.sum(axis=1).mean() / d)
    dp = (sigmoid(x) - y) / (d * tau * b)
    return loss, dp


def bce_pos(p, y, tau):
    """Positive terms of the multi-label BCE only; still divided by D."""
    b, d = p.shape
    x = p / tau
    loss = float((y * softplus(-x)).sum(axis=1).mean() / d)
    dp = y * (sigmoid(x) - 1.0) / (d * tau * b)
    return loss, dp


def knn_softmax(p, y, tau):
    """Softmax cross-entropy averaged over the positives of each row."""
    b = p.shape[0]
    x = p / tau
    n_pos = y.sum(axis=1)
    if np.any(n_pos == 0):
        raise ValueError("every row needs at least one positive")
    logp = x - logsumexp_rows(x)[:, None]
    loss = float(np.mean(-(y * logp).sum(axis=1) / n_pos))
    dx = softmax_rows(x) - y / n_pos[:, None]
    return loss, dx / (b * tau)


_ML_LOSSES = {"mls_bce": mls_bce, "bce_pos": bce_pos, "knn_softmax": knn_softmax}


def multilabel_term(z1n, g1n, bank, cfg):
    """Pseudo-labels + logits per the dictionary mode, and the ML loss.

    Returns ``(loss, dz1n, dg1n, y)``; unused gradients are None.
    """
    if cfg.dictionaries == "qz_only":
        y = is_topk(bank.scores_projector(z1n), cfg.k)
    else:
        y = is_topk(bank.scores_backbone(g1n), cfg.k)
    tau = cfg.ml_temperature
    fn = _ML_LOSSES[cfg.variant]
    if cfg.dictionaries == "qg_only":
        loss, dp = fn(bank.scores_backbone(g1n), y, tau)
        return loss, None, dp @ bank.Qg, y
    loss, dp = fn(bank.scores_projector(z1n), y, tau)
    return loss, dp @ bank.Qz, None, y


def combined_loss(z1, g1, z2, bank, cfg, use_ml=True):
    """``nce + lambda * ml`` for raw (unnormalized) embeddings.

    ``z1``/``g1`` come from the online branch, ``z2`` from the momentum
    branch (treated as a constant). When the ML term is inactive
    (``use_ml`` false, lambda 0, or variant ``infonce_only``) it is not
    evaluated at all and ``ml`` is reported as 0.

    Returns ``(LossBreakdown, grad_z1, grad_g1 or None)``.
    """
    z1n = l2_normalize_rows(z1)
    z2n = l2_normalize_rows(z2)
    nce, dz1n = infonce(z1n, z2n, bank.negatives(), cfg.tau)
    ml = 0.0
    dg1 = None
    total = nce
    if use_ml and cfg.uses_ml:
        g1n = l2_normalize_rows(g1)
        ml, dz_ml, dg_ml, _ = multilabel_term(z1n, g1n, bank, cfg)
        total = nce + cfg.lambda_ * ml
        if dz_ml is not None:
            dz1n = dz1n + cfg.lambda_ * dz_ml
        if dg_ml is not None:
            dg1 = l2_normalize_rows_backward(cfg.lambda_ * dg_ml, g1, g1n)
    dz1 = l2_normalize_rows_backward(dz1n, z1, z1n)
    return LossBreakdown(nce, ml, total, cfg.lambda_), dz1, dg1
