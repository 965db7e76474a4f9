import hashlib
import json
from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError
from .model import ModelConfig
from .objective import ObjectiveConfig
from .scenegen import SceneSpec

WARMUP_MODES = ("fill_only", "nce_epochs")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_schedule: str = "cosine"
    lr_warmup_epochs: float = 1.0
    ema_m: float = 0.99
    bank_size: int = 512
    seed: int = 0
    warmup_mode: str = "fill_only"
    warmup_epochs: int = 0
    checkpoint_every: int = 0
    precision: str = "f32"
    grad_clip: float = 10.0
    debug_checks: bool = False
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        for name in ("epochs", "batch_size", "bank_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.momentum < 0 or self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("momentum, weight_decay and grad_clip must be >= 0")
        if not 0.0 <= self.ema_m <= 1.0:
            raise ConfigError("ema_m must lie in [0, 1]")
        if self.model.projector_norm == "batch" and self.batch_size < 2:
            raise ConfigError("batch statistics in the projector need batch_size >= 2")
        if self.batch_size > self.bank_size:
            raise ConfigError("batch_size must not exceed bank_size")
        if self.batch_size > self.scene.dataset_size:
            raise ConfigError("batch_size exceeds dataset_size")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.warmup_mode not in WARMUP_MODES:
            raise ConfigError(f"warmup_mode must be one of {WARMUP_MODES}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be 'f32' or 'f64'")
        if self.objective.k >= self.bank_size:
            raise ConfigError("objective.k must be < bank_size")
        if self.model.view_size != self.scene.view_size:
            raise ConfigError("model.view_size must equal scene.view_size")
        if self.checkpoint_every < 0 or self.warmup_epochs < 0 or self.lr_warmup_epochs < 0:
            raise ConfigError("checkpoint_every and warmup_epochs must be >= 0")

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["objective"] = self.objective.to_dict()
        d["scene"] = self.scene.to_dict()
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            scene = SceneSpec.from_dict(d.pop("scene", {}))
            model = dict(d.pop("model", {}))
            model.setdefault("view_size", scene.view_size)
            return cls(objective=ObjectiveConfig.from_dict(d.pop("objective", {})),
                       scene=scene, model=ModelConfig.from_dict(model), **d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def with_overrides(self, **kw):
        """``replace`` that also accepts ``objective``/``scene``/``model`` dicts of changes."""
        try:
            for sub in ("objective", "scene", "model"):
                if isinstance(kw.get(sub), dict):
                    kw[sub] = replace(getattr(self, sub), **kw[sub])
            return replace(self, **kw)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def hash(self, ignore=("checkpoint_every",)):
        d = self.to_dict()
        for k in ignore:
            d.pop(k, None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path):
    from pathlib import Path
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {p}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return TrainConfig.from_dict(raw)
