"""Synthetic multi-label scenes and the two-view augmentation pipeline.

Each image is a textured, low-contrast background with 2-4 class glyphs.
A class is a fixed polygon outline and a fixed hue, so label sets are
known exactly and can be compared against pseudo-labels.
"""
import colorsys
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod
from ._imgkernels import fill_polygon, resize_crop
from .errors import ConfigError


@dataclass(frozen=True)
class SceneSpec:
    canvas: int = 64
    num_classes: int = 10
    objects_per_image: tuple = (2, 4)
    dataset_size: int = 5000
    seed: int = 0
    view_size: int = 32

    def __post_init__(self):
        lo, hi = self.objects_per_image
        object.__setattr__(self, "objects_per_image", (int(lo), int(hi)))
        if self.canvas < 16:
            raise ConfigError(f"canvas must be >= 16, got {self.canvas}")
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad objects_per_image range {self.objects_per_image}")
        if hi > self.num_classes:
            raise ConfigError("objects_per_image max exceeds num_classes (labels are a set)")
        if self.dataset_size < 1:
            raise ConfigError("dataset_size must be positive")
        if not 4 <= self.view_size <= self.canvas:
            raise ConfigError(f"view_size must lie in [4, canvas], got {self.view_size}")

    def to_dict(self):
        d = asdict(self)
        d["objects_per_image"] = list(self.objects_per_image)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scene keys: {sorted(unknown)}")
        if "objects_per_image" in d:
            d["objects_per_image"] = tuple(d["objects_per_image"])
        return cls(**d)


@dataclass(frozen=True)
class SceneObject:
    label: int
    cx: float
    cy: float
    radius: float


@dataclass
class SceneSample:
    image: np.ndarray  # (canvas, canvas, 3) float32 in [0, 1]
    labels: frozenset
    index: int
    objects: tuple = ()


@dataclass
class ViewRecord:
    view: np.ndarray  # (3, s, s)
    crop_box: tuple  # (x, y, w, h) in source pixels
    source_index: int
    visible_labels: frozenset
    flipped: bool = False
    grayscale: bool = False
    jittered: bool = False


# --- glyph templates -------------------------------------------------------

def _regular(n, phase=0.0):
    a = phase + 2 * np.pi * np.arange(n) / n
    return np.stack([np.cos(a), np.sin(a)], axis=1)


def _star(points, inner):
    a = -np.pi / 2 + np.pi * np.arange(2 * points) / points
    r = np.where(np.arange(2 * points) % 2 == 0, 1.0, inner)
    return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)


def _cross(t=0.38):
    return np.array([[-t, -1], [t, -1], [t, -t], [1, -t], [1, t], [t, t], [t, 1],
                     [-t, 1], [-t, t], [-1, t], [-1, -t], [-t, -t]], dtype=float)


_BASE_SHAPES = [
    _regular(3, -np.pi / 2),
    _regular(4, np.pi / 4),
    _regular(5, -np.pi / 2),
    _regular(6),
    _star(5, 0.45),
    _cross(),
    _star(4, 0.35),
    np.array([[-1, -0.45], [1, -0.45], [1, 0.45], [-1, 0.45]]),
    _regular(8, np.pi / 8),
    np.array([[0, -1], [1, 1], [0, 0.35], [-1, 1]], dtype=float),
]


def glyph_template(label):
    """Unit-radius polygon (N, 2) for a class id."""
    base = _BASE_SHAPES[label % len(_BASE_SHAPES)]
    # classes beyond the table reuse a shape, rotated
    turn = (label // len(_BASE_SHAPES)) * 0.5
    if turn:
        c, s = math.cos(turn), math.sin(turn)
        base = base @ np.array([[c, s], [-s, c]])
    return base


def class_color(label, num_classes, value=0.9):
    return np.array(colorsys.hsv_to_rgb(label / num_classes, 0.85, value))


# --- generation ------------------------------------------------------------

def _background(rng, canvas):
    base = 0.35 + 0.3 * rng.random()
    tint = (rng.random(3) - 0.5) * 0.12
    coarse = (rng.random((4, 4, 3)) - 0.5) * 0.16
    texture = resize_crop(coarse, (0, 0, 4, 4), canvas, canvas)
    img = base + tint + texture
    return img


def _place_objects(rng, spec, n):
    c = spec.canvas
    labels = rngmod.sample_without_replacement(rng, spec.num_classes, n)
    objs = []
    for lab in labels:
        r = c * (0.12 + 0.06 * rng.random())
        for _ in range(50):
            cx = r + rng.random() * (c - 2 * r)
            cy = r + rng.random() * (c - 2 * r)
            # centers at least ~half a radius sum apart: may touch, never stack
            if all(math.hypot(cx - o.cx, cy - o.cy) >= 0.9 * (r + o.radius) for o in objs):
                break
        objs.append(SceneObject(int(lab), float(cx), float(cy), float(r)))
    return objs


def render_sample(spec, index):
    """Render dataset item ``index``; a pure function of ``(spec, index)``."""
    rng = rngmod.stream(spec.seed, rngmod.DOMAIN_SCENE, index)
    lo, hi = spec.objects_per_image
    n = lo + rngmod.randint(rng, hi - lo + 1)
    img = _background(rng, spec.canvas)
    objs = _place_objects(rng, spec, n)
    for o in objs:
        poly = glyph_template(o.label) * o.radius + np.array([o.cx, o.cy])
        color = class_color(o.label, spec.num_classes, 0.75 + 0.25 * rng.random())
        fill_polygon(img, poly[:, 0].copy(), poly[:, 1].copy(), color)
    img += (rng.random(img.shape) - 0.5) * 0.08
    np.clip(img, 0.0, 1.0, out=img)
    return SceneSample(img.astype(np.float32), frozenset(o.label for o in objs), index, tuple(objs))


class SceneDataset:
    """Materialized dataset: images as one float32 array plus object lists."""

    def __init__(self, spec, images, objects):
        self.spec = spec
        self.images = images
        self.objects = objects
        self.labels = [frozenset(o.label for o in objs) for objs in objects]

    def __len__(self):
        return len(self.objects)

    def __getitem__(self, i):
        if not 0 <= i < len(self):
            raise IndexError(f"index {i} out of range for dataset of size {len(self)}")
        return SceneSample(self.images[i], self.labels[i], int(i), tuple(self.objects[i]))

    def label_matrix(self):
        y = np.zeros((len(self), self.spec.num_classes), dtype=np.float64)
        for i, labs in enumerate(self.labels):
            y[i, list(labs)] = 1.0
        return y


def generate_dataset(spec):
    if not isinstance(spec, SceneSpec):
        raise ConfigError("generate_dataset expects a SceneSpec")
    c = spec.canvas
    images = np.empty((spec.dataset_size, c, c, 3), dtype=np.float32)
    objects = []
    for i in range(spec.dataset_size):
        s = render_sample(spec, i)
        images[i] = s.image
        objects.append(s.objects)
    return SceneDataset(spec, images, objects)


# --- augmentation ----------------------------------------------------------

def visible_labels(objects, box):
    x, y, w, h = box
    return frozenset(o.label for o in objects if x <= o.cx < x + w and y <= o.cy < y + h)


def random_resized_crop_box(rng, canvas, scale=(0.2, 1.0), ratio=(3 / 4, 4 / 3)):
    area = canvas * canvas
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * (scale[0] + (scale[1] - scale[0]) * rng.random())
        ar = math.exp(log_r[0] + (log_r[1] - log_r[0]) * rng.random())
        w = int(round(math.sqrt(target * ar)))
        h = int(round(math.sqrt(target / ar)))
        if 0 < w <= canvas and 0 < h <= canvas:
            x = rngmod.randint(rng, canvas - w + 1)
            y = rngmod.randint(rng, canvas - h + 1)
            return (x, y, w, h)
    return (0, 0, canvas, canvas)


def _to_gray(img):
    g = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    return np.repeat(g[..., None], 3, axis=2)


def make_view(sample, rng, size, color=True, box=None):
    """One augmented view. ``color=False`` keeps only crop + flip."""
    canvas = sample.image.shape[0]
    if box is None:
        box = random_resized_crop_box(rng, canvas)
    img = resize_crop(sample.image, box, size, size)
    flipped = rng.random() < 0.5
    if flipped:
        img = img[:, ::-1]
    jittered = gray = False
    if color:
        u_apply, u_b, u_c = rng.random(3)
        if u_apply < 0.8:
            jittered = True
            img = img * (0.6 + 0.8 * u_b)
            mean = _to_gray(img)[..., 0].mean()
            img = (img - mean) * (0.6 + 0.8 * u_c) + mean
            img = np.clip(img, 0.0, 1.0)
        if rng.random() < 0.2:
            gray = True
            img = _to_gray(img)
    view = np.ascontiguousarray(np.transpose(img, (2, 0, 1)), dtype=np.float32)
    return ViewRecord(view, tuple(int(v) for v in box), sample.index,
                      visible_labels(sample.objects, box), bool(flipped), gray, jittered)


def augment(sample, rng, size=32):
    """Two independently augmented views of ``sample`` from one stream."""
    return make_view(sample, rng, size), make_view(sample, rng, size)


def view_stream(seed, epoch, index):
    return rngmod.stream(seed, rngmod.DOMAIN_AUG, epoch, index)


def regenerate_view(dataset, index, epoch, which):
    """Reproduce view ``which`` (0 or 1) of item ``index`` at ``epoch``."""
    v1, v2 = augment(dataset[index], view_stream(dataset.spec.seed, epoch, index), dataset.spec.view_size)
    return v1 if which == 0 else v2


def batch_views(dataset, indices, epoch, workers=1):
    """Stacked ``(B, 3, s, s)`` view tensors plus aligned ViewRecords.

    Output order follows ``indices`` regardless of worker scheduling.
    """
    n = len(dataset)
    for i in indices:
        if not 0 <= int(i) < n:
            raise IndexError(f"index {i} out of range for dataset of size {n}")
    seed, size = dataset.spec.seed, dataset.spec.view_size

    def one(i):
        i = int(i)
        return augment(dataset[i], view_stream(seed, epoch, i), size)

    if workers > 1 and len(indices) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(one, indices))
    else:
        pairs = [one(i) for i in indices]
    recs1 = [p[0] for p in pairs]
    recs2 = [p[1] for p in pairs]
    x1 = np.stack([r.view for r in recs1]) if pairs else np.empty((0, 3, size, size), np.float32)
    x2 = np.stack([r.view for r in recs2]) if pairs else np.empty((0, 3, size, size), np.float32)
    return x1, x2, list(zip(recs1, recs2))


def full_view(sample, size):
    """Deterministic whole-canvas view (no augmentation)."""
    canvas = sample.image.shape[0]
    img = resize_crop(sample.image, (0, 0, canvas, canvas), size, size)
    return np.ascontiguousarray(np.transpose(img, (2, 0, 1)), dtype=np.float32)


def eval_crop_view(sample, seed, size):
    """Crop + flip view with a fixed per-item stream, used for retrieval."""
    rng = rngmod.stream(seed, rngmod.DOMAIN_EVAL, sample.index)
    return make_view(sample, rng, size, color=False)


# --- PPM export / import ---------------------------------------------------

def encode_ppm(img):
    """Binary P6 bytes for an (H, W, 3) image in [0, 1]."""
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def write_ppm(path, img):
    """``img`` is (H, W, 3) in [0, 1]."""
    Path(path).write_bytes(encode_ppm(img))


def read_ppm(path):
    data = Path(path).read_bytes()
    parts = []
    pos = 0
    while len(parts) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        parts.append(data[pos:end])
        pos = end
    pos += 1
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    arr = np.frombuffer(data[pos:pos + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float32) / maxval


def export_dataset(dataset, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(len(dataset)):
        write_ppm(out / f"{i:06d}.ppm", dataset.images[i])
    labels = {str(i): sorted(labs) for i, labs in enumerate(dataset.labels)}
    (out / "labels.json").write_text(json.dumps(labels))
    objects = {str(i): [[o.label, o.cx, o.cy, o.radius] for o in objs]
               for i, objs in enumerate(dataset.objects)}
    (out / "objects.json").write_text(json.dumps(objects))
    (out / "spec.json").write_text(json.dumps(dataset.spec.to_dict()))


def import_dataset(in_dir):
    src = Path(in_dir)
    spec = SceneSpec.from_dict(json.loads((src / "spec.json").read_text()))
    labels = json.loads((src / "labels.json").read_text())
    obj_path = src / "objects.json"
    raw_objs = json.loads(obj_path.read_text()) if obj_path.exists() else {}
    n = len(labels)
    images = np.stack([read_ppm(src / f"{i:06d}.ppm") for i in range(n)])
    objects = []
    for i in range(n):
        if str(i) in raw_objs:
            objects.append(tuple(SceneObject(int(l), float(x), float(y), float(r))
                                 for l, x, y, r in raw_objs[str(i)]))
        else:
            # without geometry every label is treated as visible everywhere
            objects.append(tuple(SceneObject(int(l), spec.canvas / 2, spec.canvas / 2, 0.0)
                                 for l in labels[str(i)]))
    return SceneDataset(spec, images, objects)
