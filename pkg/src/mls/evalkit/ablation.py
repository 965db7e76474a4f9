"""Cartesian ablation grids over objective and dictionary settings.

Every cell trains from the same seed on one shared dataset, then reports
retrieval lift and probe mAP. Cells whose training is provably identical
(``lambda = 0`` or ``variant = infonce_only``, where k and the dictionary
mode never enter the loss) are trained once and reused.
"""
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .._io import atomic_write_json, atomic_write_text
from ..errors import ConfigError
from ..objective import DICTIONARIES, VARIANTS
from ..scenegen import generate_dataset
from ..trainer import Trainer
from ._embed import embed, full_views
from .probe import linear_probe
from .retrieval import eval_retrieval

log = logging.getLogger(__name__)

AXES = ("variant", "dictionaries", "k", "D", "lambda")
COLUMNS = ("retrieval_lift", "precision_at_k", "probe_mAP", "loss_nce", "loss_ml")


def _coerce(name, value):
    try:
        if name == "variant":
            v = str(value)
            if v not in VARIANTS:
                raise ConfigError(f"variant must be one of {VARIANTS}, got {v!r}")
            return v
        if name == "dictionaries":
            v = str(value)
            if v not in DICTIONARIES:
                raise ConfigError(f"dictionaries must be one of {DICTIONARIES}, got {v!r}")
            return v
        if name in ("k", "D"):
            f = float(value)
            if f != int(f) or f < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
            return int(f)
        if name == "lambda":
            v = float(value)
            if not v >= 0:
                raise ConfigError(f"lambda must be >= 0, got {value!r}")
            return v
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad value {value!r} for axis {name}") from exc
    raise ConfigError(f"unknown ablation axis {name!r}; expected a subset of {AXES}")


def parse_axes(spec):
    """``{"k": "1,8"}`` or ``["k=1,8", ...]`` -> ordered ``{name: [values]}``."""
    if isinstance(spec, dict):
        items = list(spec.items())
    else:
        items = []
        for s in spec:
            if "=" not in s:
                raise ConfigError(f"axis must look like name=v1,v2, got {s!r}")
            name, vals = s.split("=", 1)
            items.append((name.strip(), vals))
    axes = {}
    for name, vals in items:
        if name not in AXES:
            raise ConfigError(f"unknown ablation axis {name!r}; expected a subset of {AXES}")
        if name in axes:
            raise ConfigError(f"axis {name!r} given twice")
        if isinstance(vals, str):
            vals = [v.strip() for v in vals.split(",") if v.strip()]
        vals = [_coerce(name, v) for v in vals]
        if not vals:
            raise ConfigError(f"axis {name!r} has no values")
        axes[name] = vals
    return axes


def cell_config(base, cell):
    obj = {}
    for name, key in (("variant", "variant"), ("dictionaries", "dictionaries"),
                      ("k", "k"), ("lambda", "lambda_")):
        if name in cell:
            obj[key] = cell[name]
    kw = {"objective": obj}
    if "D" in cell:
        kw["bank_size"] = cell["D"]
    return base.with_overrides(**kw)


def training_key(cfg):
    """Hash of the config with loss-irrelevant fields canonicalized."""
    if not cfg.objective.uses_ml:
        obj = replace(cfg.objective, variant="infonce_only", lambda_=0.0, k=1,
                      dictionaries="both", tau_ml=None)
        cfg = replace(cfg, objective=obj)
    return cfg.hash()


def evaluate_cell(cfg, dataset, eval_k=4, split_seed=0):
    tr = Trainer(cfg, dataset=dataset, deterministic=True)
    tr.run()
    ret = eval_retrieval(tr.pair, dataset, k=eval_k)
    g, _ = embed(tr.pair.encoder, tr.pair.online, full_views(dataset), stats=tr.pair.online_stats)
    probe = linear_probe(g, dataset.label_matrix(), split_seed)
    last = [json.loads(s) for s in tr.state.metrics_lines[-tr.steps_per_epoch:]]
    return {"retrieval_lift": ret.lift, "precision_at_k": ret.precision_at_k,
            "probe_mAP": probe.mAP,
            "loss_nce": float(np.mean([m["loss_nce"] for m in last])),
            "loss_ml": float(np.mean([m["loss_ml"] for m in last])),
            "steps": tr.state.step}


_WORKER = {}


def _worker_init(scene_dict):
    from ..scenegen import SceneSpec
    _WORKER["dataset"] = generate_dataset(SceneSpec.from_dict(scene_dict))


def _worker_eval(args):
    from ..config import TrainConfig
    cfg_dict, eval_k, split_seed = args
    return evaluate_cell(TrainConfig.from_dict(cfg_dict), _WORKER["dataset"], eval_k, split_seed)


def format_table(axes, rows):
    """Aligned plain-text table, one line per cell."""
    head = list(axes) + list(COLUMNS) + ["reused_from"]
    body = []
    for r in rows:
        line = [str(r["cell"][a]) for a in axes]
        line += [f"{r[c]:.4f}" for c in COLUMNS]
        line.append("-" if r["reused_from"] is None else str(r["reused_from"]))
        body.append(line)
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(head)]
    fmt = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    out = [fmt(head), "  ".join("-" * w for w in widths)] + [fmt(b) for b in body]
    return "\n".join(out) + "\n"


def run_ablation_grid(base, axes, out_dir=None, dataset=None, eval_k=4, split_seed=0, processes=1):
    """Train and evaluate every cell of the cartesian product of ``axes``.

    Returns ``{"axes", "columns", "rows"}``; each row holds the cell's axis
    values, metrics, its config hash and ``reused_from`` (index of the
    cell whose training it shares, or None). With ``out_dir``, each cell is
    written to ``cells/cell_XXXX.json`` as it finishes, then the table to
    ``ablation.json`` and ``ablation.txt``.
    """
    axes = parse_axes(axes)
    names = list(axes)
    cells = [dict(zip(names, combo)) for combo in itertools.product(*axes.values())]
    cfgs = [cell_config(base, c) for c in cells]  # any invalid cell fails before training
    keys = [training_key(c) for c in cfgs]
    first = {}
    for i, key in enumerate(keys):
        first.setdefault(key, i)
    unique = sorted(set(first.values()))
    out = Path(out_dir) if out_dir is not None else None
    if dataset is None:
        dataset = generate_dataset(base.scene)

    results = {}
    if processes > 1 and len(unique) > 1:
        jobs = [(cfgs[i].to_dict(), eval_k, split_seed) for i in unique]
        with ProcessPoolExecutor(processes, initializer=_worker_init,
                                 initargs=(base.scene.to_dict(),)) as pool:
            for i, res in zip(unique, pool.map(_worker_eval, jobs)):
                results[i] = res
    else:
        for n, i in enumerate(unique):
            log.info("ablation cell %d/%d: %s", n + 1, len(unique), cells[i])
            results[i] = evaluate_cell(cfgs[i], dataset, eval_k, split_seed)
            if out is not None:
                atomic_write_json(out / "cells" / f"cell_{i:04d}.json",
                                  {"cell": cells[i], "config_hash": cfgs[i].hash(), **results[i]})

    rows = []
    for i, (cell, cfg, key) in enumerate(zip(cells, cfgs, keys)):
        src = first[key]
        row = {"index": i, "cell": cell, "config_hash": cfg.hash(),
               "reused_from": None if src == i else src, **results[src]}
        rows.append(row)
        if out is not None:
            atomic_write_json(out / "cells" / f"cell_{i:04d}.json", row)
    table = {"axes": names, "columns": list(COLUMNS), "base_config_hash": base.hash(),
             "eval_k": eval_k, "split_seed": split_seed, "rows": rows}
    if out is not None:
        atomic_write_json(out / "ablation.json", table)
        atomic_write_text(out / "ablation.txt", format_table(names, rows))
    return table
