import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from .. import rng as rngmod
from ..numkit import sigmoid, softplus
from .metrics import average_precision

log = logging.getLogger(__name__)


@dataclass
class ProbeReport:
    per_class_ap: dict
    mAP: float
    n_train: int
    n_val: int
    skipped_classes: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        return d


def split_indices(n, split_seed, train_frac=0.8):
    perm = rngmod.permutation(rngmod.stream(split_seed, rngmod.DOMAIN_SPLIT), n)
    cut = int(round(train_frac * n))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def fit_linear_bce(x, y, l2=1e-4, maxiter=500):
    """Single linear layer trained with multi-label BCE (L-BFGS)."""
    n, d = x.shape
    c = y.shape[1]

    def f(theta):
        w = theta[:d * c].reshape(d, c)
        b = theta[d * c:]
        logits = x @ w + b
        loss = (y * softplus(-logits) + (1 - y) * softplus(logits)).mean()
        dlog = (sigmoid(logits) - y) / (n * c)
        gw = x.T @ dlog + l2 * w
        gb = dlog.sum(axis=0)
        return loss + 0.5 * l2 * np.sum(w * w), np.concatenate([gw.ravel(), gb])

    res = minimize(f, np.zeros(d * c + c), jac=True, method="L-BFGS-B",
                   options={"maxiter": maxiter})
    return res.x[:d * c].reshape(d, c), res.x[d * c:]


def linear_probe(features, labels, split_seed=0, l2=1e-4):
    """Per-class AP and mAP of a linear BCE probe on frozen features.

    ``labels`` is an ``(N, C)`` 0/1 matrix. Classes without positives in
    either split are skipped and listed in the report.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    tr, va = split_indices(len(features), split_seed)
    mu = features[tr].mean(axis=0)
    sd = features[tr].std(axis=0)
    sd[sd < 1e-12] = 1.0
    xtr = (features[tr] - mu) / sd
    xva = (features[va] - mu) / sd
    w, b = fit_linear_bce(xtr, labels[tr], l2=l2)
    scores = xva @ w + b
    aps, skipped = {}, []
    for c in range(labels.shape[1]):
        if labels[tr, c].sum() == 0 or labels[va, c].sum() == 0:
            log.warning("class %d absent from a split; skipped", c)
            skipped.append(c)
            continue
        aps[c] = average_precision(scores[:, c], labels[va, c])
    m = float(np.mean(list(aps.values()))) if aps else float("nan")
    return ProbeReport(aps, m, len(tr), len(va), skipped)


def eval_linear_probe(source, dataset=None, split_seed=0):
    """Probe the frozen online backbone ``g`` of a checkpoint (directory,
    state, trainer or ``ModelPair``) on whole-image views."""
    from ._embed import embed, full_views
    from ._load import resolve_dataset, resolve_state
    from ..model import ModelPair
    pair = source
    if not isinstance(source, ModelPair):
        state = resolve_state(source)
        pair, dataset = state.pair, resolve_dataset(state, dataset)
    if dataset is None:
        raise ValueError("a dataset is required when probing a bare model pair")
    g, _ = embed(pair.encoder, pair.online, full_views(dataset), stats=pair.online_stats)
    return linear_probe(g, dataset.label_matrix(), split_seed)
