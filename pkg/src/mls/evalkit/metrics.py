"""Label-overlap retrieval precision, its exact chance level, average
precision, and a two-sample KS statistic."""
from itertools import combinations

import numpy as np

from ..errors import ConfigError


def topk_neighbors(emb, k, exclude_self=True, chunk=1024):
    """Indices ``(N, k)`` of the ``k`` most cosine-similar rows, best first.

    Ties go to the lower index.
    """
    n = emb.shape[0]
    limit = n - 1 if exclude_self else n
    if not 0 <= k <= limit:
        raise ConfigError(f"k={k} must be < dataset size {n}")
    e = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    out = np.empty((n, k), dtype=np.int64)
    cols = np.arange(n)
    for s in range(0, n, chunk):
        sim = e[s:s + chunk] @ e.T
        if exclude_self:
            sim[np.arange(sim.shape[0]), cols[s:s + chunk]] = -np.inf
        out[s:s + chunk] = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    return out


def overlap_precision(query_labels, retrieved_labels):
    """Fraction of retrieved label sets sharing >= 1 label with the query."""
    if not retrieved_labels:
        return 0.0
    q = set(query_labels)
    return sum(1 for r in retrieved_labels if q & set(r)) / len(retrieved_labels)


def _subset_counts(label_sets):
    counts = {}
    for labs in label_sets:
        labs = sorted(labs)
        for r in range(1, len(labs) + 1):
            for sub in combinations(labs, r):
                counts[sub] = counts.get(sub, 0) + 1
    return counts


def chance_overlap(label_sets, queries=None):
    """Exact probability that a uniformly drawn *other* item shares a label
    with the query, averaged over queries (inclusion-exclusion on the
    empirical label distribution).

    ``queries`` selects which items act as queries (default: all with a
    nonempty label set).
    """
    probs = chance_per_query(label_sets, queries)
    return float(np.mean(probs)) if probs else 0.0


def chance_per_query(label_sets, queries=None):
    """Per-query terms of :func:`chance_overlap`, in query order."""
    n = len(label_sets)
    counts = _subset_counts(label_sets)
    if queries is None:
        queries = [i for i, s in enumerate(label_sets) if s]
    probs = []
    for i in queries:
        labs = sorted(label_sets[i])
        hit = 0
        for r in range(1, len(labs) + 1):
            sign = 1 if r % 2 else -1
            for sub in combinations(labs, r):
                # the query itself contains every subset of its own labels
                hit += sign * (counts[sub] - 1)
        probs.append(hit / (n - 1))
    return probs


def average_precision(scores, targets):
    """Non-interpolated AP: mean precision at the rank of each positive."""
    targets = np.asarray(targets).astype(bool)
    n_pos = int(targets.sum())
    if n_pos == 0:
        raise ValueError("average precision undefined without positives")
    order = np.argsort(-np.asarray(scores), kind="stable")
    t = targets[order]
    s = np.asarray(scores)[order]
    # tied scores share the precision at the end of their block
    hits = np.cumsum(t)
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    block_end = np.repeat(ends, np.diff(np.r_[-1, ends]))
    prec = hits[block_end] / (block_end + 1)
    recall_step = t / n_pos
    return float(np.sum(prec * recall_step))


def ks_statistic(a, b):
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))
