"""Score distributions of one sample against the dictionaries, before and
after training."""
from pathlib import Path

import numpy as np

from .._io import atomic_write_bytes, atomic_write_json
from ..bank import BankNotReadyError, DictBank
from ..model import ModelPair
from ..numkit import l2_normalize_rows
from ..scenegen import encode_ppm, full_view, regenerate_view
from ._embed import embed
from ._load import resolve_dataset, resolve_state
from .metrics import ks_statistic

BINS = 64
RANGE = (-1.0, 1.0)


def score_histogram(scores, bins=BINS):
    """Counts over ``bins`` equal bins on [-1, 1]; cosines that round past
    the ends are clipped so every score is counted."""
    s = np.clip(np.asarray(scores, dtype=np.float64).ravel(), *RANGE)
    counts, edges = np.histogram(s, bins=bins, range=RANGE)
    return counts.astype(np.int64), edges


def render_bar_chart(counts, height=96, bar_width=4, color=(0.15, 0.35, 0.8)):
    """(H, W, 3) image of a histogram, bars scaled to the tallest bin."""
    counts = np.asarray(counts)
    img = np.ones((height, len(counts) * bar_width, 3))
    top = counts.max() if counts.size and counts.max() > 0 else 1
    for i, c in enumerate(counts):
        h = int(round((height - 2) * c / top))
        if h:
            img[height - h:, i * bar_width:(i + 1) * bar_width - 1] = color
    img[-1, :] = 0.0  # baseline
    return img


def rebuild_bank(pair, bank, dataset):
    """Re-embed every slot's stored key view with ``pair``'s momentum
    encoder, keeping the slot order and metadata of ``bank``."""
    if np.any(bank.meta_source < 0):
        raise BankNotReadyError("bank holds slots without provenance")
    views = np.stack([regenerate_view(dataset, int(src), int(ep), 1).view
                      for src, ep in zip(bank.meta_source, bank.meta_epoch)])
    g, z = embed(pair.encoder, pair.momentum, views, stats=pair.momentum_stats)
    fresh = DictBank(bank.capacity, g.shape[1], z.shape[1])
    fresh.Qg[...] = l2_normalize_rows(g)
    fresh.Qz[...] = l2_normalize_rows(z)
    fresh.meta_source[...] = bank.meta_source
    fresh.meta_box[...] = bank.meta_box
    fresh.meta_epoch[...] = bank.meta_epoch
    fresh.head, fresh.filled = bank.head, bank.filled
    return fresh


def dump_score_histograms(source, sample_index=0, out_dir=None, dataset=None, bins=BINS):
    """Histograms of ``g1 . Qg`` and ``z1 . Qz`` for one sample's full
    view, for the trained model and the same run's initialization (whose
    bank is rebuilt from the trained bank's slot metadata).

    Returns the JSON-ready report; with ``out_dir`` also writes
    ``histograms.json`` and one PPM bar chart per (model, space).
    """
    state = resolve_state(source)
    bank = state.bank
    if not bank.is_full:
        raise BankNotReadyError(f"bank holds {bank.filled}/{bank.capacity} items")
    dataset = resolve_dataset(state, dataset)
    cfg = state.config
    view = full_view(dataset[sample_index], cfg.model.view_size)[None]

    def scores(pair, qbank):
        g, z = embed(pair.encoder, pair.online, view, stats=pair.online_stats)
        gn, zn = l2_normalize_rows(g), l2_normalize_rows(z)
        return (gn @ qbank.Qg.T.astype(np.float64))[0], (zn @ qbank.Qz.T.astype(np.float64))[0]

    dtype = state.pair.online["projector.fc0.w"].dtype
    init_pair = ModelPair.create(cfg.model, cfg.seed, cfg.ema_m, dtype)
    runs = {"trained": scores(state.pair, bank),
            "initial": scores(init_pair, rebuild_bank(init_pair, bank, dataset))}
    report = {"sample_index": int(sample_index), "labels": sorted(dataset.labels[sample_index]),
              "bins": bins, "range": list(RANGE), "step": state.step}
    edges = None
    for name, (sg, sz) in runs.items():
        cg, edges = score_histogram(sg, bins)
        cz, _ = score_histogram(sz, bins)
        report[name] = {"backbone": cg.tolist(), "projector": cz.tolist(),
                        "backbone_mean": float(sg.mean()), "projector_mean": float(sz.mean())}
    report["edges"] = [float(e) for e in edges]
    report["ks_backbone"] = ks_statistic(runs["trained"][0], runs["initial"][0])
    report["ks_projector"] = ks_statistic(runs["trained"][1], runs["initial"][1])
    if out_dir is not None:
        out = Path(out_dir)
        for name in runs:
            for space, color in (("backbone", (0.15, 0.35, 0.8)), ("projector", (0.8, 0.3, 0.15))):
                img = render_bar_chart(report[name][space], color=color)
                atomic_write_bytes(out / f"hist_{name}_{space}.ppm", encode_ppm(img))
        atomic_write_json(out / "histograms.json", report)
    return report
