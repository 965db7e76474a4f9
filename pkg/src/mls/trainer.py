"""Pretraining loop: scenes -> two views -> online/momentum encoders ->
InfoNCE (+ lambda * multi-label term once the bank is ready) -> SGD ->
EMA -> enqueue -> one metrics line."""
import json
import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .bank import DictBank
from .checkpoint import TrainState, load_checkpoint, save_checkpoint
from .model import ModelPair
from .numkit import sgd_step
from .objective import LossBreakdown, combined_loss
from .scenegen import batch_views, generate_dataset

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


def warmup_policy(cfg, bank, epoch):
    """``"combined"`` once the bank holds only real items (and, in
    ``nce_epochs`` mode, the warm-up epochs are over); else ``"nce_only"``."""
    if not bank.is_full:
        return "nce_only"
    if cfg.warmup_mode == "nce_epochs" and epoch < cfg.warmup_epochs:
        return "nce_only"
    return "combined"


def lr_at(cfg, step, total_steps, steps_per_epoch):
    """Linear ramp over ``lr_warmup_epochs``, then constant or cosine to zero."""
    warm = int(round(cfg.lr_warmup_epochs * steps_per_epoch))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    if cfg.lr_schedule == "constant":
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / max(total_steps - warm, 1)))


def env_workers():
    raw = os.environ.get("MLS_THREADS", "").strip()
    if not raw:
        return 1
    return max(1, int(raw))


@dataclass
class StepMetrics:
    step: int
    epoch: int
    loss_nce: float
    loss_ml: float
    loss_total: float
    bank_filled: int
    grad_norm: float
    wall_ms: float
    lr: float
    mode: str

    def to_json(self):
        return json.dumps(self.__dict__, separators=(",", ":"))


def grad_global_norm(grads):
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


class Trainer:
    def __init__(self, cfg, run_dir=None, dataset=None, deterministic=True, workers=None):
        self.cfg = cfg
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.dataset = dataset if dataset is not None else generate_dataset(cfg.scene)
        self.deterministic = deterministic
        w = env_workers() if workers is None else workers
        self.workers = 1 if deterministic else w
        self.dtype = np.float32 if cfg.precision == "f32" else np.float64
        self.state = TrainState(
            config=cfg,
            pair=ModelPair.create(cfg.model, cfg.seed, cfg.ema_m, self.dtype),
            velocity={},
            bank=DictBank(cfg.bank_size, cfg.model.d_g, cfg.model.d_z, self.dtype),
            step=0,
            metrics_lines=[],
        )
        self.steps_per_epoch = len(self.dataset) // cfg.batch_size
        self.total_steps = self.steps_per_epoch * cfg.epochs
        self._perm_cache = {}

    # -- state -------------------------------------------------------------
    @property
    def pair(self):
        return self.state.pair

    @property
    def bank(self):
        return self.state.bank

    def resume(self, ckpt_dir):
        st = load_checkpoint(ckpt_dir, expect_config=self.cfg)
        st.pair.m = self.cfg.ema_m
        self.state = st
        log.info("resumed from %s at step %d", ckpt_dir, st.step)

    def checkpoint(self, path):
        return save_checkpoint(path, self.state)

    # -- data --------------------------------------------------------------
    def epoch_order(self, epoch):
        if epoch not in self._perm_cache:
            self._perm_cache = {epoch: rngmod.permutation(
                rngmod.stream(self.cfg.seed, rngmod.DOMAIN_PERM, epoch), len(self.dataset))}
        return self._perm_cache[epoch]

    def batch_indices(self, step):
        epoch, b = divmod(step, self.steps_per_epoch)
        bs = self.cfg.batch_size
        return epoch, self.epoch_order(epoch)[b * bs:(b + 1) * bs]

    # -- one step ----------------------------------------------------------
    def losses(self, x1, x2, mode):
        """Forward both branches and the objective. Returns
        ``(breakdown, grads, keys)`` where ``keys = (g2, z2)`` to enqueue."""
        pair, obj = self.pair, self.cfg.objective
        use_ml = mode == "combined"
        g1, z1, cache = pair.forward_online(x1)
        g2, z2 = pair.forward_momentum(x2)
        bd, dz1, dg1 = combined_loss(z1, g1, z2, self.bank, obj, use_ml)
        grads = pair.encoder.backward(pair.online, cache, dg1, dz1)
        if obj.symmetrize:
            g1b, z1b, cache_b = pair.forward_online(x2)
            _, z2b = pair.forward_momentum(x1)
            bd_b, dz1b, dg1b = combined_loss(z1b, g1b, z2b, self.bank, obj, use_ml)
            grads_b = pair.encoder.backward(pair.online, cache_b, dg1b, dz1b)
            grads = {k: 0.5 * (grads[k] + grads_b[k]) for k in grads}
            bd = LossBreakdown(0.5 * (bd.nce + bd_b.nce), 0.5 * (bd.ml + bd_b.ml),
                               0.5 * (bd.total + bd_b.total), bd.lambda_)
        return bd, grads, (g2, z2)

    def train_step(self):
        cfg, st = self.cfg, self.state
        t0 = time.perf_counter()
        epoch, idx = self.batch_indices(st.step)
        x1, x2, recs = batch_views(self.dataset, idx, epoch, workers=self.workers)
        x1 = x1.astype(self.dtype, copy=False)
        x2 = x2.astype(self.dtype, copy=False)
        mode = warmup_policy(cfg, self.bank, epoch)
        bd, grads, (g2, z2) = self.losses(x1, x2, mode)
        if not all(math.isfinite(v) for v in (bd.nce, bd.ml, bd.total)):
            self._abort(f"non-finite loss at step {st.step}: {bd}", idx, epoch)
        gnorm = grad_global_norm(grads)
        if not math.isfinite(gnorm):
            self._abort(f"non-finite gradient norm at step {st.step}", idx, epoch)
        if cfg.grad_clip and gnorm > cfg.grad_clip:
            scale = cfg.grad_clip / gnorm
            grads = {k: g * scale for k, g in grads.items()}
        lr = lr_at(cfg, st.step, self.total_steps, self.steps_per_epoch)
        sgd_step(self.pair.online, grads, st.velocity, lr, cfg.momentum, cfg.weight_decay)
        self.pair.ema_update()
        # enqueue after the update so an item never scores against itself
        sources = [r[1].source_index for r in recs]
        boxes = [r[1].crop_box for r in recs]
        self.bank.enqueue(g2, z2, sources, boxes, epoch)
        if cfg.debug_checks:
            self.bank.check_unit_norm()
        wall = None if self.deterministic else round((time.perf_counter() - t0) * 1e3, 3)
        m = StepMetrics(st.step, epoch, bd.nce, bd.ml, bd.total, self.bank.filled, gnorm,
                        wall, lr, mode)
        st.step += 1
        return m

    def _abort(self, msg, idx, epoch):
        diag = {
            "message": msg, "step": self.state.step, "epoch": epoch,
            "batch_indices": [int(i) for i in idx],
            "bank": {"filled": self.bank.filled, "head": self.bank.head,
                     "qg_norm_range": [float(np.linalg.norm(self.bank.Qg, axis=1).min()),
                                       float(np.linalg.norm(self.bank.Qg, axis=1).max())],
                     "qz_finite": bool(np.isfinite(self.bank.Qz).all())},
            "param_finite": {k: bool(np.isfinite(v).all()) for k, v in self.pair.online.items()},
        }
        if self.run_dir is not None:
            d = self.run_dir / "dumps"
            d.mkdir(parents=True, exist_ok=True)
            (d / f"abort_step{self.state.step:06d}.json").write_text(json.dumps(diag, indent=1))
        raise TrainingAborted(msg)

    # -- loop --------------------------------------------------------------
    def run(self, stop_at=None, progress=False):
        """Train until ``stop_at`` steps (default: all epochs). Appends to
        ``run_dir/metrics.jsonl`` and writes checkpoints; returns the state."""
        cfg, st = self.cfg, self.state
        end = self.total_steps if stop_at is None else min(stop_at, self.total_steps)
        mfile = None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / "checkpoints").mkdir(exist_ok=True)
            (self.run_dir / "dumps").mkdir(exist_ok=True)
            # rewrite the prefix so the file always equals the state's stream
            mpath = self.run_dir / "metrics.jsonl"
            mpath.write_text("".join(line + "\n" for line in st.metrics_lines))
            mfile = open(mpath, "a")
        try:
            while st.step < end:
                m = self.train_step()
                line = m.to_json()
                st.metrics_lines.append(line)
                if mfile is not None:
                    mfile.write(line + "\n")
                    mfile.flush()
                if progress and (m.step % self.steps_per_epoch == 0):
                    log.info("epoch %d step %d loss %.4f (nce %.4f ml %.4f) %s",
                             m.epoch, m.step, m.loss_total, m.loss_nce, m.loss_ml, m.mode)
                if self.run_dir is not None and cfg.checkpoint_every and st.step % cfg.checkpoint_every == 0:
                    self.checkpoint(self.run_dir / "checkpoints" / f"step_{st.step:06d}")
        finally:
            if mfile is not None:
                mfile.close()
        if self.run_dir is not None and st.step == self.total_steps:
            self.checkpoint(self.run_dir / "checkpoints" / "final")
        return st


def train(cfg, run_dir=None, dataset=None, deterministic=True, resume=None, stop_at=None, progress=False):
    t = Trainer(cfg, run_dir, dataset, deterministic)
    if resume is not None:
        t.resume(resume)
    t.run(stop_at=stop_at, progress=progress)
    return t
