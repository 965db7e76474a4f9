from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError
from ..model import ModelPair
from ._embed import crop_views, embed
from ._load import resolve_dataset, resolve_state
from .metrics import chance_overlap, overlap_precision, topk_neighbors


@dataclass
class RetrievalReport:
    k: int
    precision_at_k: float
    random_baseline: float
    lift: float
    n_queries: int
    n_items: int

    def to_dict(self):
        return asdict(self)


def retrieval_report(features, label_sets, k):
    """Precision@k of label-sharing neighbors (self excluded) and lift over
    the exact chance rate. Items with empty label sets stay in the pool
    but are not used as queries."""
    n = len(label_sets)
    if k >= n:
        raise ConfigError(f"k={k} must be smaller than the dataset size {n}")
    nbrs = topk_neighbors(np.asarray(features), k)
    queries = [i for i in range(n) if label_sets[i]]
    prec = [overlap_precision(label_sets[i], [label_sets[j] for j in nbrs[i]]) for i in queries]
    p = float(np.mean(prec)) if prec else 0.0
    base = chance_overlap(label_sets, queries)
    return RetrievalReport(k, p, base, p / base if base > 0 else float("nan"), len(queries), n)


def eval_retrieval(source, dataset=None, k=4):
    """Embed one crop view per image with the online backbone and score
    label overlap of its nearest neighbors across the dataset.

    ``source`` is a ``ModelPair`` or anything ``resolve_state`` accepts;
    the dataset defaults to the checkpoint's scene config."""
    pair = source
    if not isinstance(source, ModelPair):
        state = resolve_state(source)
        pair, dataset = state.pair, resolve_dataset(state, dataset)
    if dataset is None:
        raise ValueError("a dataset is required when evaluating a bare model pair")
    if k >= len(dataset):
        raise ConfigError(f"k={k} must be smaller than the dataset size {len(dataset)}")
    views, recs = crop_views(dataset)
    g, _ = embed(pair.encoder, pair.online, views, stats=pair.online_stats)
    return retrieval_report(g, [r.visible_labels for r in recs], k)
