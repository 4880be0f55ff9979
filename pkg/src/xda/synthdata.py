"""Two-domain synthetic segmentation benchmark.

Scenes are flat-shaded geometric shapes (circle, rectangle, triangle) over a
textured background. The source domain renders them with a class-correlated
palette; the target domain draws from the same geometry distribution and
then applies a photometric shift (hue rotation, illumination gain, blur and
sensor noise). Labels are exact: a pixel is labelled with the topmost shape
whose analytic region contains the pixel centre.
"""

from __future__ import annotations

import functools
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

BACKGROUND, CIRCLE, RECTANGLE, TRIANGLE = range(4)
CLASS_NAMES = ("background", "circle", "rectangle", "triangle")
DOMAINS = ("source", "target")

# seeds for the three splits never overlap
SPLIT_OFFSETS = {"source_train": 0, "target_train": 1_000_000, "target_eval": 2_000_000}


@dataclass(frozen=True)
class DomainShift:
    hue_deg: float = 45.0
    noise_std: float = 0.15
    blur: int = 3
    gain: float = 0.8

    def __post_init__(self):
        if not -180.0 <= self.hue_deg <= 180.0:
            raise ValueError("hue_deg must lie in [-180, 180]")
        if not 0.0 <= self.noise_std <= 0.5:
            raise ValueError("noise_std must lie in [0, 0.5]")
        if not 0 <= self.blur <= 15:
            raise ValueError("blur must lie in [0, 15]")
        if not 0.0 < self.gain <= 2.0:
            raise ValueError("gain must lie in (0, 2]")

    @classmethod
    def null(cls):
        return cls(hue_deg=0.0, noise_std=0.0, blur=0, gain=1.0)

    @property
    def is_null(self):
        return self.hue_deg == 0 and self.noise_std == 0 and self.blur <= 1 and self.gain == 1.0


@dataclass(frozen=True)
class DataConfig:
    height: int = 64
    width: int = 64
    classes: int = 4
    shape_probs: tuple = (0.4, 0.35, 0.25)
    min_shapes: int = 2
    max_shapes: int = 5
    min_size: float = 0.1
    max_size: float = 0.22
    hue_jitter_deg: float = 25.0
    shift: DomainShift = field(default_factory=DomainShift)
    n_source_train: int = 512
    n_target_train: int = 512
    n_target_eval: int = 128

    def __post_init__(self):
        if self.classes != 4:
            raise ValueError("the generator renders exactly 4 classes")
        if len(self.shape_probs) != 3 or abs(sum(self.shape_probs) - 1.0) > 1e-9:
            raise ValueError("shape_probs must be 3 probabilities summing to 1")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 1 <= min_shapes <= max_shapes")


@dataclass(frozen=True)
class Shape:
    cls: int
    cy: float
    cx: float
    size: float
    angle: float
    aspect: float = 1.0

    def contains(self, ys, xs):
        """Boolean mask of points (pixel-centre coordinates) inside the shape."""
        dy = ys - self.cy
        dx = xs - self.cx
        if self.cls == CIRCLE:
            return dy * dy + dx * dx <= self.size * self.size
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        if self.cls == RECTANGLE:
            return (np.abs(u) <= self.size * self.aspect) & (np.abs(v) <= self.size / self.aspect)
        if self.cls == TRIANGLE:
            inside = np.ones(np.broadcast(u, v).shape, dtype=bool)
            for k in range(3):
                a = 2 * math.pi * k / 3
                # half-planes of an equilateral triangle with inradius size/2
                inside &= (math.cos(a) * u + math.sin(a) * v) >= -self.size / 2
            return inside
        raise ValueError(f"no geometry for class {self.cls}")


@dataclass
class Scene:
    image: np.ndarray
    label: np.ndarray
    domain: str
    seed: int
    shapes: list


def _hue_matrix(deg):
    """RGB rotation about the grey axis."""
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    k = 1.0 / 3.0
    r = math.sqrt(k)
    return np.array(
        [
            [c + (1 - c) * k, k * (1 - c) - r * s, k * (1 - c) + r * s],
            [k * (1 - c) + r * s, c + k * (1 - c), k * (1 - c) - r * s],
            [k * (1 - c) - r * s, k * (1 - c) + r * s, c + k * (1 - c)],
        ]
    )


def _hsv_color(rng, hue_deg, jitter_deg):
    h = (hue_deg + rng.uniform(-jitter_deg, jitter_deg)) % 360.0
    s = rng.uniform(0.55, 0.9)
    v = rng.uniform(0.6, 0.95)
    return _hsv_to_rgb(h, s, v)


def _hsv_to_rgb(h, s, v):
    i = int(h // 60) % 6
    f = h / 60.0 - math.floor(h / 60.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


# base hue per foreground class in the source palette
_CLASS_HUE = {CIRCLE: 0.0, RECTANGLE: 120.0, TRIANGLE: 240.0}


def sample_shapes(rng, config):
    n = int(rng.integers(config.min_shapes, config.max_shapes + 1))
    classes = rng.choice([CIRCLE, RECTANGLE, TRIANGLE], size=n, p=config.shape_probs)
    side = min(config.height, config.width)
    shapes = []
    for cls in classes:
        size = rng.uniform(config.min_size, config.max_size) * side
        shapes.append(
            Shape(
                cls=int(cls),
                cy=float(rng.uniform(0, config.height)),
                cx=float(rng.uniform(0, config.width)),
                size=float(size),
                angle=float(rng.uniform(0, 2 * math.pi)),
                aspect=float(rng.uniform(0.7, 1.4)) if cls == RECTANGLE else 1.0,
            )
        )
    return shapes


def render(shapes, rng, config):
    """Source-domain rendering of a shape list: (image, label)."""
    h, w = config.height, config.width
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    base = rng.uniform(0.25, 0.55) * np.ones(3) + rng.uniform(-0.05, 0.05, size=3)
    # low-frequency background texture
    coarse = rng.normal(0.0, 0.08, size=(4, 4, 1))
    tex = ndimage.zoom(coarse, (h / 4, w / 4, 1), order=1, mode="nearest")
    image = np.clip(base + tex, 0.0, 1.0)
    label = np.zeros((h, w), dtype=np.int64)
    for shp in shapes:
        m = shp.contains(ys, xs)
        color = _hsv_color(rng, _CLASS_HUE[shp.cls], config.hue_jitter_deg)
        shade = 1.0 + 0.15 * ((ys - shp.cy) / max(shp.size, 1.0))
        image[m] = np.clip(color[None, :] * shade[m][:, None], 0.0, 1.0)
        label[m] = shp.cls
    return image, label


def apply_shift(image, shift, rng):
    """Photometric domain shift; returns the input unchanged for a null shift."""
    out = image
    if shift.hue_deg:
        out = out @ _hue_matrix(shift.hue_deg).T
    if shift.gain != 1.0:
        out = out * shift.gain
    if shift.blur > 1:
        out = ndimage.uniform_filter(out, size=(shift.blur, shift.blur, 1), mode="nearest")
    if shift.noise_std:
        out = out + rng.normal(0.0, shift.noise_std, size=out.shape)
    if out is image:
        return image
    return np.clip(out, 0.0, 1.0)


def gen_scene(domain, seed, config=DataConfig()):
    """Deterministic scene for (domain, seed).

    Geometry and palette depend only on ``seed``; the target domain then
    applies ``config.shift`` with its own noise stream.
    """
    if domain not in DOMAINS:
        raise ValueError(f"domain must be one of {DOMAINS}")
    rng = np.random.default_rng([int(seed), 0])
    shapes = sample_shapes(rng, config)
    image, label = render(shapes, rng, config)
    if domain == "target":
        image = apply_shift(image, config.shift, np.random.default_rng([int(seed), 1]))
    return Scene(image=image, label=label, domain=domain, seed=int(seed), shapes=shapes)


@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray
    seeds: np.ndarray
    domain: str


def split_seeds(name, config):
    n = {
        "source_train": config.n_source_train,
        "target_train": config.n_target_train,
        "target_eval": config.n_target_eval,
    }[name]
    return np.arange(n) + SPLIT_OFFSETS[name]


@functools.lru_cache(maxsize=8)
def load_split(name, config=DataConfig()):
    domain = "source" if name.startswith("source") else "target"
    seeds = split_seeds(name, config)
    scenes = [gen_scene(domain, int(s), config) for s in seeds]
    images = np.stack([s.image for s in scenes]).astype(np.float64)
    labels = np.stack([s.label for s in scenes])
    images.setflags(write=False)
    labels.setflags(write=False)
    return Split(images, labels, seeds, domain)


# -- metrics ----------------------------------------------------------------


def confusion(pred, label, classes):
    pred = np.asarray(pred).reshape(-1)
    label = np.asarray(label).reshape(-1)
    if pred.shape != label.shape:
        raise ValueError(f"prediction and label sizes differ: {pred.size} vs {label.size}")
    if pred.size == 0:
        raise ValueError("empty prediction")
    if pred.min() < 0 or label.min() < 0 or pred.max() >= classes or label.max() >= classes:
        raise ValueError(f"class ids must lie in [0, {classes})")
    return np.bincount(label * classes + pred, minlength=classes * classes).reshape(classes, classes)


def miou(pred, label, classes):
    """Per-class IoU (NaN for classes absent from both) and their mean."""
    cm = confusion(pred, label, classes)
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    iou = np.full(classes, np.nan)
    present = union > 0
    iou[present] = tp[present] / union[present]
    return iou, float(np.mean(iou[present]))


# -- export -------------------------------------------------------------------


def write_ppm(path, image):
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def write_pgm(path, gray):
    g = np.asarray(gray)
    if g.dtype != np.uint8:
        g = g.astype(np.uint8)
    h, w = g.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(g.tobytes())


def read_pnm(path):
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    pos += 1
    magic, w, h, _ = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    arr = np.frombuffer(data[pos:], dtype=np.uint8)
    return arr.reshape(h, w, 3) if magic == "P6" else arr.reshape(h, w)


def export_dataset(out_dir, config=DataConfig()):
    """Write every split as PPM/PGM files plus a tab-separated manifest."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for name in SPLIT_OFFSETS:
        domain = "source" if name.startswith("source") else "target"
        sub = os.path.join(out_dir, name)
        os.makedirs(sub, exist_ok=True)
        for seed in split_seeds(name, config):
            scene = gen_scene(domain, int(seed), config)
            img = os.path.join(name, f"{seed:07d}.ppm")
            lab = os.path.join(name, f"{seed:07d}.pgm")
            write_ppm(os.path.join(out_dir, img), scene.image)
            write_pgm(os.path.join(out_dir, lab), scene.label)
            lines.append(f"{seed}\t{domain}\t{img}\t{lab}\n")
    manifest = os.path.join(out_dir, "manifest.tsv")
    with open(manifest, "w") as f:
        f.writelines(lines)
    return manifest


def with_shift(config, **kw):
    return replace(config, shift=replace(config.shift, **kw))
