"""Nearest dictionary entries for query crops, rendered as an image grid."""
from pathlib import Path

import numpy as np

from .. import rng as rngmod
from .._imgkernels import resize_crop
from .._io import atomic_write_bytes, atomic_write_json
from ..bank import BankNotReadyError
from ..errors import ConfigError
from ..numkit import l2_normalize_rows
from ..scenegen import encode_ppm, eval_crop_view, visible_labels
from ._embed import embed
from ._load import resolve_dataset, resolve_state
from .metrics import chance_per_query

PAD = 2


class MetaMissingError(BankNotReadyError):
    pass


def _ranked(scores, k):
    # stable on ties: equal scores keep slot order
    order = np.argsort(-scores, kind="stable")[:k]
    return order, scores[order]


def _slot_crop(dataset, bank, slot, size):
    src = int(bank.meta_source[slot])
    x, y, w, h = (int(v) for v in bank.meta_box[slot])
    canvas = dataset.spec.canvas
    if not (0 <= x and 0 <= y and w > 0 and h > 0 and x + w <= canvas and y + h <= canvas):
        raise ValueError(f"slot {slot}: crop box {(x, y, w, h)} leaves the {canvas}px canvas")
    sample = dataset[src]
    return resize_crop(sample.image, (x, y, w, h), size, size), sample, (x, y, w, h)


def render_grid(rows, size, pad=PAD):
    """``rows`` is a list of lists of (size, size, 3) tiles; ragged rows are
    padded with white. Returns one (H, W, 3) image."""
    ncol = max((len(r) for r in rows), default=0)
    h = len(rows) * (size + pad) + pad
    w = max(ncol, 1) * (size + pad) + pad
    img = np.ones((h, w, 3))
    for i, row in enumerate(rows):
        for j, tile in enumerate(row):
            y0, x0 = pad + i * (size + pad), pad + j * (size + pad)
            img[y0:y0 + size, x0:x0 + size] = tile
    return img


def dump_neighbors(source, n_queries=8, k=4, out_dir=None, dataset=None, seed=0, pool=256):
    """Top-``k`` backbone-dictionary neighbors for ``n_queries`` random
    query crops, plus the query with the lowest retrieval lift among a
    random pool of ``pool`` candidates (marked ``"kind": "worst"``).

    Neighbors are cosine scores of the online ``g`` of the query against
    ``Qg``; their crops are re-cut from the source images with the stored
    boxes. Returns the JSON-ready report; with ``out_dir`` it also writes
    ``neighbors.json`` and ``neighbors.ppm`` (one row per query, query in
    the first column).
    """
    state = resolve_state(source)
    bank = state.bank
    if bank.filled == 0 or np.any(bank.meta_source[:bank.filled] < 0):
        raise MetaMissingError("bank has no slot metadata to draw neighbors from")
    if k < 0 or k > bank.filled:
        raise ConfigError(f"k={k} must lie in [0, {bank.filled}]")
    dataset = resolve_dataset(state, dataset)
    n = len(dataset)
    size = state.config.model.view_size
    valid = np.arange(bank.filled) if not bank.is_full else np.arange(bank.capacity)

    rng = rngmod.stream(seed, rngmod.DOMAIN_QUERY)
    pool_idx = rngmod.sample_without_replacement(rng, n, min(n, max(pool, n_queries)))
    queries = [int(i) for i in pool_idx[:n_queries]]
    recs = {int(i): eval_crop_view(dataset[int(i)], dataset.spec.seed, size) for i in pool_idx}
    views = np.stack([recs[int(i)].view for i in pool_idx])
    g, _ = embed(state.pair.encoder, state.pair.online, views, stats=state.pair.online_stats)
    scores = l2_normalize_rows(g) @ bank.Qg[valid].T.astype(np.float64)

    def entry(row, idx, kind):
        rec = recs[idx]
        order, sc = _ranked(scores[row], k)
        nbrs = []
        for slot, s in zip(valid[order], sc):
            _, sample, box = _slot_crop(dataset, bank, slot, size)
            nbrs.append({"slot": int(slot), "source_index": int(bank.meta_source[slot]),
                         "crop_box": list(box), "score": float(s),
                         "labels": sorted(visible_labels(sample.objects, box))})
        q = set(rec.visible_labels)
        overlap = (float(np.mean([bool(q & set(nb["labels"])) for nb in nbrs]))
                   if nbrs and q else None)
        return {"kind": kind, "source_index": idx, "crop_box": list(rec.crop_box),
                "labels": sorted(rec.visible_labels), "overlap": overlap, "neighbors": nbrs}

    entries = [entry(r, q, "random") for r, q in enumerate(queries)]
    if k > 0:
        # lift = overlap / the query's chance of sharing a label with a
        # random crop of the pool
        pool_sets = [set(recs[int(i)].visible_labels) for i in pool_idx]
        rows = [r for r, s in enumerate(pool_sets) if s]
        chance = dict(zip(rows, chance_per_query(pool_sets, rows))) if len(pool_sets) > 1 else {}
        cands = []
        for r in rows:
            if chance.get(r, 0) > 0:
                c = entry(r, int(pool_idx[r]), "worst")
                c["lift"] = c["overlap"] / chance[r]
                cands.append(c)
        if cands:
            entries.append(min(cands, key=lambda c: c["lift"]))
    report = {"k": k, "n_queries": n_queries, "seed": seed, "step": state.step, "queries": entries}
    if out_dir is not None:
        out = Path(out_dir)
        rows = []
        for e in entries:
            tiles = [np.transpose(recs[e["source_index"]].view, (1, 2, 0))]
            tiles += [_slot_crop(dataset, bank, nb["slot"], size)[0] for nb in e["neighbors"]]
            rows.append(tiles)
        atomic_write_bytes(out / "neighbors.ppm", encode_ppm(render_grid(rows, size)))
        atomic_write_json(out / "neighbors.json", report)
    return report
