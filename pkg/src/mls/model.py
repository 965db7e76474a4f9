"""Online encoder/projector, its momentum twin, and the EMA update.

Parameters live in flat ``dict[str, ndarray]`` so the optimizer, the EMA
and checkpointing can treat them uniformly. The backward pass is written
by hand; ``forward(..., keep_cache=True)`` returns what it needs.
"""
from dataclasses import asdict, dataclass

import numpy as np

from . import rng as rngmod
from .numkit import (ShapeError, batch_norm, batch_norm_backward, layer_norm,
                     layer_norm_backward, relu, relu_backward)
from .numkit.conv import conv2d, conv2d_backward, out_size


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "conv"  # "conv" or "mlp"
    d_g: int = 64
    d_z: int = 16
    channels: tuple = (16, 32, 64)
    mlp_hidden: int = 256
    view_size: int = 32
    norm: str = "layer"  # "layer" or "none", applied after each conv
    projector_norm: str = "batch"  # "batch" or "none", on the projector output
    bn_momentum: float = 0.1
    input_mean: float = 0.5
    input_std: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.backbone not in ("conv", "mlp"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.norm not in ("layer", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.projector_norm not in ("batch", "none"):
            raise ValueError(f"unknown projector_norm {self.projector_norm!r}")
        if not 0.0 < self.bn_momentum <= 1.0:
            raise ValueError("bn_momentum must lie in (0, 1]")
        if self.backbone == "conv" and self.channels[-1] != self.d_g:
            raise ValueError("conv backbone: last channel count must equal d_g")

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Encoder:
    """Backbone phi (conv or MLP, ReLU, global pool) followed by the
    2-layer projector f with hidden width ``2 * d_z``.

    With ``projector_norm="batch"`` the projector output is standardized
    per feature (no affine). Training forwards use batch statistics and
    fold them into running estimates kept in a separate ``stats`` dict;
    inference forwards use the running estimates, so rows stay independent.
    Centering across the batch removes the shared component that a
    negatives-heavy loss would otherwise keep pushing on.
    """

    kernel, stride, pad = 3, 2, 1

    def __init__(self, cfg):
        self.cfg = cfg

    def param_shapes(self):
        c = self.cfg
        shapes = {}
        if c.backbone == "conv":
            cin = 3
            for i, cout in enumerate(c.channels):
                shapes[f"backbone.conv{i}.w"] = (self.kernel * self.kernel * cin, cout)
                shapes[f"backbone.conv{i}.b"] = (cout,)
                if c.norm == "layer":
                    shapes[f"backbone.norm{i}.gamma"] = (cout,)
                    shapes[f"backbone.norm{i}.beta"] = (cout,)
                cin = cout
        else:
            nin = 3 * c.view_size * c.view_size
            shapes["backbone.fc0.w"] = (nin, c.mlp_hidden)
            shapes["backbone.fc0.b"] = (c.mlp_hidden,)
            shapes["backbone.fc1.w"] = (c.mlp_hidden, c.d_g)
            shapes["backbone.fc1.b"] = (c.d_g,)
        shapes["projector.fc0.w"] = (c.d_g, 2 * c.d_z)
        shapes["projector.fc0.b"] = (2 * c.d_z,)
        shapes["projector.fc1.w"] = (2 * c.d_z, c.d_z)
        if c.projector_norm != "batch":  # a bias would be cancelled by the centering
            shapes["projector.fc1.b"] = (c.d_z,)
        return shapes

    def init_params(self, seed, dtype=np.float64):
        """Fan-in scaled uniform weights, zero biases."""
        rng = rngmod.stream(seed, rngmod.DOMAIN_INIT)
        params = {}
        for name, shape in self.param_shapes().items():
            if name.endswith(".b") or name.endswith(".beta"):
                params[name] = np.zeros(shape, dtype=dtype)
            elif name.endswith(".gamma"):
                params[name] = np.ones(shape, dtype=dtype)
            else:
                bound = np.sqrt(6.0 / shape[0])
                params[name] = ((rng.random(shape) * 2.0 - 1.0) * bound).astype(dtype)
        return params

    def init_stats(self, dtype=np.float64):
        if self.cfg.projector_norm != "batch":
            return {}
        d = self.cfg.d_z
        return {"projector.bn.mean": np.zeros(d, dtype=dtype),
                "projector.bn.var": np.ones(d, dtype=dtype)}

    def _check(self, views):
        s = self.cfg.view_size
        if views.ndim != 4 or views.shape[1:] != (3, s, s):
            raise ShapeError(f"views must be (B, 3, {s}, {s}), got {views.shape}")

    def forward(self, params, views, keep_cache=False, stats=None, training=False):
        """Returns ``(g, z, cache)``; ``cache`` is None unless requested.

        ``training=True`` normalizes the projector output with batch
        statistics and, if ``stats`` is given, updates it in place.
        Otherwise ``stats`` (or unit statistics when absent) are used.
        """
        self._check(views)
        dtype = params["projector.fc0.w"].dtype
        cache = {}
        views = (views - dtype.type(self.cfg.input_mean)) / dtype.type(self.cfg.input_std)
        if self.cfg.backbone == "conv":
            x = np.ascontiguousarray(np.transpose(views, (0, 2, 3, 1)), dtype=dtype)
            for i in range(len(self.cfg.channels)):
                shape_in = x.shape
                pre, cols = conv2d(x, params[f"backbone.conv{i}.w"], params[f"backbone.conv{i}.b"],
                                   self.kernel, self.stride, self.pad)
                saved = None
                if self.cfg.norm == "layer":
                    pre, saved = layer_norm(pre, params[f"backbone.norm{i}.gamma"],
                                            params[f"backbone.norm{i}.beta"])
                x = relu(pre)
                if keep_cache:
                    cache[f"conv{i}"] = (shape_in, cols, x, saved)
            g = x.mean(axis=(1, 2))
            if keep_cache:
                cache["pool_hw"] = x.shape[1:3]
        else:
            x = views.reshape(views.shape[0], -1).astype(dtype, copy=False)
            h = relu(x @ params["backbone.fc0.w"] + params["backbone.fc0.b"])
            g = relu(h @ params["backbone.fc1.w"] + params["backbone.fc1.b"])
            if keep_cache:
                cache["x"], cache["h"], cache["g_pre_relu_out"] = x, h, g
        hp = relu(g @ params["projector.fc0.w"] + params["projector.fc0.b"])
        z = hp @ params["projector.fc1.w"]
        if self.cfg.projector_norm == "batch":
            z = self._project_norm(z, cache, stats, training, keep_cache)
        else:
            z = z + params["projector.fc1.b"]
        if keep_cache:
            cache["g"], cache["hp"] = g, hp
        return g, z, (cache if keep_cache else None)

    def _project_norm(self, z, cache, stats, training, keep_cache):
        if training:
            if z.shape[0] < 2:
                raise ShapeError("batch statistics need at least two rows")
            z, saved, mu, var = batch_norm(z)
            if stats:
                mom = self.cfg.bn_momentum
                n = z.shape[0]
                stats["projector.bn.mean"] += mom * (mu - stats["projector.bn.mean"])
                stats["projector.bn.var"] += mom * (var * n / (n - 1) - stats["projector.bn.var"])
            if keep_cache:
                cache["proj_bn"] = saved
            return z
        if stats:
            mean, var = stats["projector.bn.mean"], stats["projector.bn.var"]
        else:
            mean, var = 0.0, 1.0
        z, saved, _, _ = batch_norm(z, mean=mean, var=var)
        if keep_cache:
            cache["proj_bn_fixed"] = saved[1]
        return z

    def backward(self, params, cache, grad_g, grad_z):
        """Parameter gradients given upstream gradients on ``g`` and ``z``."""
        grads = {}
        g, hp = cache["g"], cache["hp"]
        if "proj_bn" in cache:
            grad_z = batch_norm_backward(grad_z, cache["proj_bn"])
        elif "proj_bn_fixed" in cache:
            grad_z = grad_z * cache["proj_bn_fixed"]
        grads["projector.fc1.w"] = hp.T @ grad_z
        if "projector.fc1.b" in params:
            grads["projector.fc1.b"] = grad_z.sum(axis=0)
        dhp = relu_backward(grad_z @ params["projector.fc1.w"].T, hp)
        grads["projector.fc0.w"] = g.T @ dhp
        grads["projector.fc0.b"] = dhp.sum(axis=0)
        dg = dhp @ params["projector.fc0.w"].T
        if grad_g is not None:
            dg = dg + grad_g
        if self.cfg.backbone == "conv":
            hh, ww = cache["pool_hw"]
            n = len(self.cfg.channels)
            dx = np.broadcast_to((dg / (hh * ww))[:, None, None, :], (dg.shape[0], hh, ww, dg.shape[1]))
            for i in reversed(range(n)):
                shape_in, cols, out, saved = cache[f"conv{i}"]
                dpre = relu_backward(dx, out)
                if saved is not None:
                    dpre, dgam, dbet = layer_norm_backward(dpre, params[f"backbone.norm{i}.gamma"], saved)
                    grads[f"backbone.norm{i}.gamma"] = dgam
                    grads[f"backbone.norm{i}.beta"] = dbet
                dx, gw, gb = conv2d_backward(dpre, shape_in, cols, params[f"backbone.conv{i}.w"],
                                             self.kernel, self.stride, self.pad, need_input_grad=i > 0)
                grads[f"backbone.conv{i}.w"] = gw
                grads[f"backbone.conv{i}.b"] = gb
        else:
            x, h, gout = cache["x"], cache["h"], cache["g_pre_relu_out"]
            dpre = relu_backward(dg, gout)
            grads["backbone.fc1.w"] = h.T @ dpre
            grads["backbone.fc1.b"] = dpre.sum(axis=0)
            dh = relu_backward(dpre @ params["backbone.fc1.w"].T, h)
            grads["backbone.fc0.w"] = x.T @ dh
            grads["backbone.fc0.b"] = dh.sum(axis=0)
        return grads


def feature_map_size(cfg):
    s = cfg.view_size
    for _ in cfg.channels:
        s = out_size(s, Encoder.kernel, Encoder.stride, Encoder.pad)
    return s


class ModelPair:
    """Online parameters (optimized) and their EMA twin (never optimized)."""

    def __init__(self, encoder, online, momentum=None, m=0.99, online_stats=None,
                 momentum_stats=None):
        if not 0.0 <= m <= 1.0:
            raise ValueError(f"EMA coefficient must lie in [0, 1], got {m}")
        self.encoder = encoder
        self.online = online
        self.momentum = {k: v.copy() for k, v in online.items()} if momentum is None else momentum
        self.m = m
        dtype = online["projector.fc0.w"].dtype
        self.online_stats = encoder.init_stats(dtype) if online_stats is None else online_stats
        self.momentum_stats = ({k: v.copy() for k, v in self.online_stats.items()}
                               if momentum_stats is None else momentum_stats)

    @classmethod
    def create(cls, cfg, seed, m=0.99, dtype=np.float64):
        enc = Encoder(cfg)
        return cls(enc, enc.init_params(seed, dtype), m=m)

    def forward_online(self, views, keep_cache=True, training=True):
        return self.encoder.forward(self.online, views, keep_cache=keep_cache,
                                    stats=self.online_stats, training=training)

    def forward_momentum(self, views, training=True):
        g, z, _ = self.encoder.forward(self.momentum, views, keep_cache=False,
                                       stats=self.momentum_stats, training=training)
        return g, z

    def ema_update(self):
        ema_update(self.momentum, self.online, self.m)


def ema_update(momentum, online, m):
    """``theta_m <- m * theta_m + (1 - m) * theta`` in place.

    Written as ``theta + m * (theta_m - theta)`` so that ``m = 0`` copies
    exactly and equal parameters stay bit-identical; ``m = 1`` is a no-op.
    """
    if m == 1.0:
        return
    for name, p in online.items():
        pm = momentum[name]
        if m == 0.0:
            pm[...] = p
        else:
            pm[...] = p + m * (pm - p)
