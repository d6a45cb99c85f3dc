"""Synthetic "shapes world" segmentation scenes.

Each scene is a gray background with a per-image tint and randomly placed rectangles,
circles and triangles. Every shape class has a base colour; a per-shape colour
jitter and Gaussian pixel noise are added. Later shapes occlude earlier ones,
and the label map is the exact rasterization of the shapes.
"""
import colorsys
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import sstn
from .errors import FormatError

MANIFEST = "manifest.json"
DATASET_FORMAT = "segdetect-dataset"
DATASET_VERSION = 1
SHAPE_KINDS = ("rectangle", "circle", "triangle")


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 5
    channels: int = 3
    shapes_per_image: tuple = (3, 6)
    noise_std: float = 0.05
    contrast: float = 0.1
    seed: int = 7

    def __post_init__(self):
        object.__setattr__(self, "shapes_per_image", tuple(int(v) for v in self.shapes_per_image))
        if self.height < 1 or self.width < 1:
            raise ValueError(f"zero-area image {self.height}x{self.width}")
        if self.num_classes < 3:
            raise ValueError(f"need at least 3 classes (background + 2 shapes), got {self.num_classes}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        lo, hi = self.shapes_per_image
        if lo < 0 or hi < lo:
            raise ValueError(f"bad shapes_per_image range {self.shapes_per_image}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not 0 < self.contrast <= 0.5:
            raise ValueError(f"contrast must lie in (0, 0.5], got {self.contrast}")

    def to_dict(self):
        d = asdict(self)
        d["shapes_per_image"] = list(self.shapes_per_image)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class LabeledImage:
    image: np.ndarray          # (H, W, channels), values in [0, 1]
    labels: np.ndarray         # (H, W) integer class ids
    shapes: list = field(default_factory=list)

    def __post_init__(self):
        if self.image.shape[:2] != self.labels.shape:
            raise ValueError(f"image {self.image.shape} and labels {self.labels.shape} differ spatially")


def class_palette(num_classes, channels=3, contrast=0.1):
    """Base colour per class.

    Class 0 (background) is mid gray; shape classes sit at distance
    ``contrast`` from it along distinct hue directions (or distinct gray
    levels for single-channel images).
    """
    if channels == 1:
        levels = 0.5 + contrast * np.linspace(-1.0, 1.0, num_classes - 1)
        return np.concatenate([[0.5], levels])[:, None] if num_classes > 2 else levels[:, None]
    colours = [np.full(3, 0.5)]
    for c in range(1, num_classes):
        hue = ((c - 1) * 0.618033988749895) % 1.0
        rgb = np.array(colorsys.hsv_to_rgb(hue, 1.0, 1.0))
        direction = rgb - rgb.mean()
        direction /= np.linalg.norm(direction)
        # alternate a small brightness offset so hue neighbours stay apart
        shift = 0.25 * contrast * (1 if c % 2 else -1)
        colours.append(0.5 + contrast * direction + shift)
    return np.array(colours)


def rasterize(shape, height, width):
    """Boolean mask for one shape record."""
    yy, xx = np.mgrid[0:height, 0:width]
    yy = yy + 0.5
    xx = xx + 0.5
    kind = shape["kind"]
    if kind == "rectangle":
        y0, x0, y1, x1 = shape["box"]
        return (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
    if kind == "circle":
        cy, cx, r = shape["center"][0], shape["center"][1], shape["radius"]
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "triangle":
        (ay, ax), (by, bx), (cy, cx) = shape["vertices"]
        d1 = (xx - bx) * (ay - by) - (ax - bx) * (yy - by)
        d2 = (xx - cx) * (by - cy) - (bx - cx) * (yy - cy)
        d3 = (xx - ax) * (cy - ay) - (cx - ax) * (yy - ay)
        has_neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
        has_pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
        return ~(has_neg & has_pos)
    raise ValueError(f"unknown shape kind {kind!r}")


def render_labels(shapes, height, width):
    labels = np.zeros((height, width), dtype=np.int64)
    for shape in shapes:
        labels[rasterize(shape, height, width)] = shape["cls"]
    return labels


def _random_shape(rng, cfg):
    h, w = cfg.height, cfg.width
    scale = min(h, w)
    cls = int(rng.integers(1, cfg.num_classes))
    kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
    jitter = [float(v) for v in rng.uniform(-0.2, 0.2, size=cfg.channels) * cfg.contrast]
    while True:
        if kind == "rectangle":
            sh = float(rng.uniform(0.25, 0.55) * scale)
            sw = float(rng.uniform(0.25, 0.55) * scale)
            y0 = float(rng.uniform(0, h - sh))
            x0 = float(rng.uniform(0, w - sw))
            rec = {"kind": kind, "cls": cls, "box": [y0, x0, y0 + sh, x0 + sw]}
        elif kind == "circle":
            r = float(rng.uniform(0.12, 0.26) * scale)
            cy = float(rng.uniform(r, h - r))
            cx = float(rng.uniform(r, w - r))
            rec = {"kind": kind, "cls": cls, "center": [cy, cx], "radius": r}
        else:
            size = float(rng.uniform(0.35, 0.65) * scale)
            oy = float(rng.uniform(0, h - size))
            ox = float(rng.uniform(0, w - size))
            pts = rng.uniform(0, size, size=(3, 2)) + np.array([oy, ox])
            rec = {"kind": kind, "cls": cls, "vertices": [[float(a), float(b)] for a, b in pts]}
        # reject shapes covering fewer than 6 pixels
        if rasterize(rec, h, w).sum() >= 6:
            rec["jitter"] = jitter
            return rec


def render_scene(rng, cfg):
    """One LabeledImage drawn from ``rng``."""
    h, w, ch = cfg.height, cfg.width, cfg.channels
    palette = class_palette(cfg.num_classes, ch, cfg.contrast)
    lo, hi = cfg.shapes_per_image
    count = int(rng.integers(lo, hi + 1))
    shapes = [_random_shape(rng, cfg) for _ in range(count)]

    # background: base gray with a random per-image tint
    tint = rng.uniform(-0.2, 0.2, size=ch) * cfg.contrast
    image = np.empty((h, w, ch))
    image[...] = palette[0] + tint

    labels = np.zeros((h, w), dtype=np.int64)
    for shape in shapes:
        mask = rasterize(shape, h, w)
        image[mask] = palette[shape["cls"]] + np.asarray(shape["jitter"])
        labels[mask] = shape["cls"]
    if cfg.noise_std > 0:
        image += rng.normal(0.0, cfg.noise_std, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return LabeledImage(image=image, labels=labels, shapes=shapes)


def generate_dataset(config, count):
    """``count`` scenes; image ``i`` depends only on ``(config.seed, i)``."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    return [render_scene(np.random.default_rng([config.seed, i]), config) for i in range(count)]


def split_indices(count, fractions=(0.7, 0.15)):
    """Index ranges for train / val / test (70/15/15 by position)."""
    n_train = int(count * fractions[0])
    n_val = int(count * fractions[1])
    idx = np.arange(count)
    return {"train": idx[:n_train], "val": idx[n_train:n_train + n_val],
            "test": idx[n_train + n_val:]}


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_dataset(path, dataset, config=None, extra=None):
    """Write ``dataset`` as one SSTN1 file per image and label map plus a
    ``manifest.json`` index."""
    os.makedirs(path, exist_ok=True)
    entries = []
    for i, item in enumerate(dataset):
        img_name = f"image_{i:05d}.sstn"
        lbl_name = f"labels_{i:05d}.sstn"
        sstn.save(os.path.join(path, img_name), item.image)
        sstn.save(os.path.join(path, lbl_name), item.labels)
        entries.append({"image": img_name, "labels": lbl_name, "shapes": item.shapes})
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "count": len(entries),
        "config": config.to_dict() if isinstance(config, SceneConfig) else config,
        "entries": entries,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(path, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_manifest(path):
    mpath = os.path.join(path, MANIFEST)
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise FormatError(f"no dataset manifest at {mpath}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt manifest {mpath}: {exc}") from exc
    if manifest.get("format") != DATASET_FORMAT or manifest.get("version") != DATASET_VERSION:
        raise FormatError(f"{mpath} is not a version-{DATASET_VERSION} {DATASET_FORMAT} manifest")
    if manifest.get("count") != len(manifest.get("entries", [])):
        raise FormatError(f"{mpath}: count does not match number of entries")
    return manifest


def load_dataset(path):
    """Inverse of :func:`save_dataset`; raises FormatError on any corrupt file."""
    manifest = read_manifest(path)
    out = []
    for entry in manifest["entries"]:
        image = sstn.load(os.path.join(path, entry["image"]))
        labels = sstn.load(os.path.join(path, entry["labels"]))
        if image.ndim != 3 or labels.shape != image.shape[:2]:
            raise FormatError(f"{path}: entry {entry['image']} has inconsistent shapes")
        out.append(LabeledImage(image=image, labels=labels.astype(np.int64),
                                shapes=entry.get("shapes", [])))
    return out
