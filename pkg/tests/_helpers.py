"""Small configs and an independent MoCo-style reference loop."""
import json
import math

import numpy as np

from mls.config import TrainConfig
from mls.model import ModelPair
from mls.numkit import l2_normalize_rows, l2_normalize_rows_backward
from mls.scenegen import batch_views
from mls import rng as rngmod


def tiny_config(**kw):
    base = TrainConfig(epochs=2, batch_size=16, bank_size=32, lr=0.05, precision="f64").with_overrides(
        scene={"dataset_size": 64, "view_size": 16},
        model={"view_size": 16, "channels": (4, 8, 16), "d_g": 16, "d_z": 8},
        objective={"k": 4})
    return base.with_overrides(**kw) if kw else base


def moco_reference(cfg, dataset):
    """Plain InfoNCE training written against the model API only: its own
    queue, loss, gradient, schedule and loop. Returns metric dicts with the
    fields a baseline run determines (losses, lr, grad norm, queue fill)."""
    dtype = np.float32 if cfg.precision == "f32" else np.float64
    pair = ModelPair.create(cfg.model, cfg.seed, cfg.ema_m, dtype)
    queue = np.zeros((cfg.bank_size, cfg.model.d_z), dtype=dtype)
    head = filled = 0
    velocity = {k: np.zeros_like(v) for k, v in pair.online.items()}
    n, bs, tau = len(dataset), cfg.batch_size, cfg.objective.tau
    spe = n // bs
    total = spe * cfg.epochs
    warm = int(round(cfg.lr_warmup_epochs * spe))
    out = []
    for step in range(total):
        epoch, b = divmod(step, spe)
        order = rngmod.permutation(rngmod.stream(cfg.seed, rngmod.DOMAIN_PERM, epoch), n)
        idx = order[b * bs:(b + 1) * bs]
        x1, x2, _ = batch_views(dataset, idx, epoch)
        x1, x2 = x1.astype(dtype), x2.astype(dtype)
        g1, z1, cache = pair.forward_online(x1)
        _, z2 = pair.forward_momentum(x2)
        q, k = l2_normalize_rows(z1), l2_normalize_rows(z2)
        # InfoNCE: positive logit first, then the filled queue
        negs = queue[:filled]
        logits = np.concatenate([np.einsum("ij,ij->i", q, k)[:, None], q @ negs.T], axis=1) / tau
        mx = logits.max(axis=1, keepdims=True)
        lse = (mx + np.log(np.exp(logits - mx).sum(axis=1, keepdims=True)))[:, 0]
        loss = float(np.mean(lse - logits[:, 0]))
        e = np.exp(logits - mx)
        soft = e / e.sum(axis=1, keepdims=True)
        soft[:, 0] -= 1.0
        soft /= len(idx) * tau
        dq = soft[:, :1] * k + soft[:, 1:] @ negs
        grads = pair.encoder.backward(pair.online, cache, None, l2_normalize_rows_backward(dq, z1, q))
        gnorm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        if cfg.grad_clip and gnorm > cfg.grad_clip:
            grads = {name: g * (cfg.grad_clip / gnorm) for name, g in grads.items()}
        if step < warm:
            lr = cfg.lr * (step + 1) / warm
        else:
            lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / max(total - warm, 1)))
        for name, p in pair.online.items():
            v = velocity[name]
            v *= cfg.momentum
            v += grads[name]
            v += cfg.weight_decay * p
            p -= lr * v
        for name, p in pair.online.items():
            pm = pair.momentum[name]
            pm[...] = p + cfg.ema_m * (pm - p)
        # circular write, slot order preserved
        for row in k:
            queue[head] = row
            head = (head + 1) % cfg.bank_size
        filled = min(filled + len(k), cfg.bank_size)
        out.append({"step": step, "epoch": epoch, "loss_nce": loss, "loss_total": loss,
                    "loss_ml": 0.0, "grad_norm": gnorm, "lr": lr, "bank_filled": filled})
    return out


def read_metrics(path):
    return [json.loads(line) for line in open(path)]


# one line per acceptance criterion; printed in the terminal summary
ACCEPTANCE_LINES = []


def record(criterion, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed
