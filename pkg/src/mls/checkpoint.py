"""Checkpoint directories: ``manifest.json`` + tensor blob + a copy of the
metrics lines written so far (so a resumed run reproduces the full
stream)."""
import json
import os
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .bank import DictBank
from .config import TrainConfig
from .model import Encoder, ModelPair
from .numkit import load_tensors, save_tensors

CHECKPOINT_FORMAT = "mls-checkpoint/1"


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainState:
    config: TrainConfig
    pair: ModelPair
    velocity: dict
    bank: DictBank
    step: int
    metrics_lines: list


def save_checkpoint(path, state):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    tensors = {}
    for k, v in state.pair.online.items():
        tensors["online." + k] = v
    for k, v in state.pair.momentum.items():
        tensors["momentum." + k] = v
    for k, v in state.pair.online_stats.items():
        tensors["online_stats." + k] = v
    for k, v in state.pair.momentum_stats.items():
        tensors["momentum_stats." + k] = v
    for k, v in state.velocity.items():
        tensors["velocity." + k] = v
    tensors.update(state.bank.state_dict())
    save_tensors(tmp / "tensors", tensors)
    cfg = state.config
    spe = cfg.scene.dataset_size // cfg.batch_size
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": __version__,
        "step": state.step,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        # data order and views are pure functions of (seed, epoch, index)
        "rng": {"seed": cfg.seed, "epoch": state.step // spe, "batch_in_epoch": state.step % spe},
        "ema_m": state.pair.m,
        "metrics_lines": len(state.metrics_lines),
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1))
    (tmp / "metrics.jsonl").write_text("".join(line + "\n" for line in state.metrics_lines))
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expect_config=None):
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise CheckpointError(f"no checkpoint manifest at {path}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    if manifest.get("version", "").split(".")[0] != __version__.split(".")[0]:
        raise CheckpointError(f"checkpoint version {manifest.get('version')} incompatible with {__version__}")
    cfg = TrainConfig.from_dict(manifest["config"])
    if expect_config is not None:
        _check_shapes_compatible(expect_config, cfg)
        if expect_config.hash() != cfg.hash():
            raise CheckpointError("config differs from the one the checkpoint was trained with")
    tensors = load_tensors(path / "tensors")
    enc = Encoder(cfg.model)
    shapes = enc.param_shapes()
    dtype = np.float32 if cfg.precision == "f32" else np.float64
    online, momentum, velocity = {}, {}, {}
    for name, shape in shapes.items():
        for prefix, dest in (("online.", online), ("momentum.", momentum)):
            arr = tensors.get(prefix + name)
            if arr is None or arr.shape != shape:
                raise CheckpointError(f"{prefix}{name}: expected shape {shape}, "
                                      f"found {None if arr is None else arr.shape}")
            dest[name] = arr.astype(dtype, copy=False)
        v = tensors.get("velocity." + name)
        if v is not None:
            velocity[name] = v.astype(dtype, copy=False)
    stats = {}
    for prefix in ("online_stats.", "momentum_stats."):
        want = enc.init_stats(dtype)
        for name, ref in want.items():
            arr = tensors.get(prefix + name)
            if arr is None or arr.shape != ref.shape:
                raise CheckpointError(f"{prefix}{name}: expected shape {ref.shape}, "
                                      f"found {None if arr is None else arr.shape}")
            want[name] = arr.astype(dtype, copy=True)
        stats[prefix] = want
    try:
        bank = DictBank.from_state(tensors)
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing bank tensor {exc}") from exc
    if bank.Qg.shape != (cfg.bank_size, cfg.model.d_g) or bank.Qz.shape != (cfg.bank_size, cfg.model.d_z):
        raise CheckpointError("bank shape does not match config")
    pair = ModelPair(enc, online, momentum, m=manifest.get("ema_m", cfg.ema_m),
                     online_stats=stats["online_stats."], momentum_stats=stats["momentum_stats."])
    mfile = path / "metrics.jsonl"
    lines = mfile.read_text().splitlines() if mfile.exists() else []
    return TrainState(cfg, pair, velocity, bank, int(manifest["step"]), lines)


def _check_shapes_compatible(expect, found):
    want = Encoder(expect.model).param_shapes()
    have = Encoder(found.model).param_shapes()
    if want != have:
        diff = [k for k in set(want) | set(have) if want.get(k) != have.get(k)]
        raise CheckpointError(f"parameter shapes differ from expected model: {sorted(diff)}")
    if (expect.bank_size, expect.model.d_g, expect.model.d_z) != (found.bank_size, found.model.d_g, found.model.d_z):
        raise CheckpointError("bank dimensions differ from expected config")
