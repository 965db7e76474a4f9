import numpy as np

from ..scenegen import eval_crop_view, full_view


def embed(encoder, params, views, batch=256, stats=None):
    """Inference-mode ``(g, z)`` for a stack of views, in batches."""
    dtype = params["projector.fc0.w"].dtype
    gs, zs = [], []
    for s in range(0, len(views), batch):
        g, z, _ = encoder.forward(params, np.asarray(views[s:s + batch], dtype=dtype), stats=stats)
        gs.append(g)
        zs.append(z)
    return np.concatenate(gs).astype(np.float64), np.concatenate(zs).astype(np.float64)


def full_views(dataset):
    size = dataset.spec.view_size
    return np.stack([full_view(dataset[i], size) for i in range(len(dataset))])


def crop_views(dataset):
    """One crop+flip view per item with its visible-label set."""
    recs = [eval_crop_view(dataset[i], dataset.spec.seed, dataset.spec.view_size)
            for i in range(len(dataset))]
    return np.stack([r.view for r in recs]), recs
