"""Datasets, stratified splits, augmentation, resizing and synthetic glyphs.

Images are single-channel float32 arrays in [0, 1]. Every random choice is
drawn from a generator seeded by an explicit tuple, so batch contents and
order are a pure function of (manifest, seed, stage, epoch).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError

IMAGE_SUFFIXES = (".png",)


# -- splits ----------------------------------------------------------------

def stratified_split(labels, val_frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class random split with ``round(val_frac * N)`` validation samples overall.

    Class quotas use largest-remainder rounding, so each class is within one
    sample of its exact share and the total is exact. Returns sorted
    ``(train_idx, val_idx)``.
    """
    if not 0 <= val_frac < 1:
        raise ConfigError(f"val_frac must lie in [0, 1), got {val_frac}")
    labels = np.asarray(labels)
    classes = np.unique(labels)
    counts = np.array([(labels == c).sum() for c in classes])
    exact = counts * val_frac
    quota = np.floor(exact).astype(int)
    short = int(math.floor(val_frac * labels.size + 0.5)) - quota.sum()
    if short > 0:
        # largest fractional part first, lower class index on ties
        order = sorted(range(len(classes)), key=lambda i: (-(exact[i] - quota[i]), i))
        for i in order[:short]:
            quota[i] += 1
    rng = np.random.default_rng(seed)
    val = []
    for c, q in zip(classes, quota):
        idx = np.flatnonzero(labels == c)
        val.extend(rng.permutation(idx)[:q].tolist())
    val = np.sort(np.array(val, dtype=np.int64))
    train = np.setdiff1d(np.arange(labels.size), val)
    return train, val


# -- manifest ---------------------------------------------------------------

@dataclass
class DatasetManifest:
    """Class list, samples and the train/validation partition.

    ``sources`` are file paths for folder datasets or ``synth:<class>:<n>`` ids
    for generated ones; generated pixels live in ``images``.
    """

    classes: list[str]
    sources: list[str]
    labels: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    seed: int
    images: np.ndarray | None = None
    origin: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.sources) != self.labels.size:
            raise DataError("sources and labels differ in length")
        both = np.intersect1d(self.train_idx, self.val_idx)
        if both.size or np.union1d(self.train_idx, self.val_idx).size != self.labels.size:
            raise DataError("train/validation indices must partition the samples")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def __len__(self):
        return self.labels.size

    def split(self, name: str) -> np.ndarray:
        if name == "train":
            return self.train_idx
        if name in ("val", "valid", "validation"):
            return self.val_idx
        if name == "all":
            return np.arange(len(self))
        raise ConfigError(f"unknown split {name!r}")

    def image(self, i: int) -> np.ndarray:
        if self.images is not None:
            return self.images[i]
        if i not in self._cache:
            self._cache[i] = read_png(self.sources[i])
        return self._cache[i]

    def counts(self) -> dict[str, int]:
        return {c: int((self.labels == k).sum()) for k, c in enumerate(self.classes)}

    def to_json(self) -> str:
        doc = {
            "classes": self.classes,
            "counts": self.counts(),
            "seed": self.seed,
            "origin": self.origin,
            "split": {"train": self.train_idx.tolist(), "validation": self.val_idx.tolist()},
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def read_png(path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32)
    except Exception as exc:  # PIL raises a zoo of types for bad files
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr / np.float32(255.0)


def load_image_folder(root, val_frac: float = 0.25, seed: int = 0) -> DatasetManifest:
    """Index ``root/<class_label>/*.png``; classes sorted lexicographically.

    Images are decoded lazily on first access and then cached.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"data root {root} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(classes) < 2:
        raise DataError(f"need at least two class folders under {root}, found {len(classes)}")
    sources, labels = [], []
    for k, c in enumerate(classes):
        files = sorted(p for p in (root / c).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"class folder {root / c} contains no images")
        sources.extend(str(f) for f in files)
        labels.extend([k] * len(files))
    train, val = stratified_split(labels, val_frac, seed)
    return DatasetManifest(classes, sources, np.array(labels), train, val, seed,
                           origin={"kind": "folder", "root": str(root), "val_frac": val_frac})


# -- image ops ----------------------------------------------------------------

def _bilinear_axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = (src - i0).astype(np.float32)
    return i0, i1, w


def resize(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize to ``size x size`` using pixel-centre alignment."""
    if size < 1:
        raise ConfigError(f"resize target must be >= 1, got {size}")
    img = np.asarray(image, dtype=np.float32)
    if img.shape == (size, size):
        return img.copy()
    r0, r1, wr = _bilinear_axis(img.shape[0], size)
    c0, c1, wc = _bilinear_axis(img.shape[1], size)
    rows = img[r0] * (1 - wr)[:, None] + img[r1] * wr[:, None]
    out = rows[:, c0] * (1 - wc) + rows[:, c1] * wc
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class AugmentConfig:
    """Random zoom, lighting and perspective warp; out-of-frame pixels are mirrored.

    ``lighting`` bounds both the additive brightness shift and the contrast
    change (contrast factor in ``[1 - lighting, 1 + lighting]``).
    ``warp_magnitude`` bounds each corner's displacement as a fraction of the
    image side.
    """

    zoom_range: tuple[float, float] = (0.9, 1.1)
    lighting: float = 0.2
    warp_magnitude: float = 0.05
    padding: str = "mirror"

    def __post_init__(self):
        lo, hi = self.zoom_range
        if not 0 < lo <= hi:
            raise ConfigError(f"zoom range must satisfy 0 < min <= max, got {self.zoom_range}")
        if self.lighting < 0 or self.warp_magnitude < 0:
            raise ConfigError("lighting and warp magnitude must be >= 0")
        if self.padding != "mirror":
            raise ConfigError(f"only mirror padding is supported, got {self.padding!r}")

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls((1.0, 1.0), 0.0, 0.0)


def _homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 projective map taking each ``src`` corner to the matching ``dst`` corner."""
    a = []
    b = []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    h = np.linalg.solve(np.array(a, float), np.array(b, float))
    return np.append(h, 1.0).reshape(3, 3)


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape
    zoom = rng.uniform(*cfg.zoom_range)
    corners_jitter = rng.uniform(-cfg.warp_magnitude, cfg.warp_magnitude, size=(4, 2))
    brightness = rng.uniform(-cfg.lighting, cfg.lighting)
    contrast = rng.uniform(1 - cfg.lighting, 1 + cfg.lighting)

    out = img
    if zoom != 1.0 or np.any(corners_jitter != 0):
        # normalized coordinates in [-1, 1]; map output pixels back into the source
        corners = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], float)
        warped = corners + 2 * corners_jitter
        hmat = _homography(corners, warped)
        ys, xs = np.mgrid[0:h, 0:w].astype(float)
        pu = (xs + 0.5) / w * 2 - 1
        pv = (ys + 0.5) / h * 2 - 1
        pts = np.stack([pu.ravel(), pv.ravel(), np.ones(pu.size)])
        q = hmat @ pts
        qu, qv = q[0] / q[2] / zoom, q[1] / q[2] / zoom
        src_x = (qu + 1) / 2 * w - 0.5
        src_y = (qv + 1) / 2 * h - 0.5
        out = ndimage.map_coordinates(img, [src_y, src_x], order=1, mode="mirror").reshape(h, w)
    if brightness != 0.0 or contrast != 1.0:
        # written so that zero jitter reproduces the input bit-for-bit
        out = out + (out - np.float32(0.5)) * np.float32(contrast - 1) + np.float32(brightness)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# -- synthetic glyphs -------------------------------------------------------------

def _seg_dist(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / max(dx * dx + dy * dy, 1e-12), 0, 1)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def _arc_dist(px, py, cx, cy, r, a0, a1):
    ang = np.arctan2(py - cy, px - cx)
    span = (a1 - a0) % (2 * np.pi)
    inside = ((ang - a0) % (2 * np.pi)) <= span
    ring = np.abs(np.hypot(px - cx, py - cy) - r)
    e0 = np.hypot(px - (cx + r * np.cos(a0)), py - (cy + r * np.sin(a0)))
    e1 = np.hypot(px - (cx + r * np.cos(a1)), py - (cy + r * np.sin(a1)))
    return np.where(inside, ring, np.minimum(e0, e1))


def _glyph_template(seed: int, c: int) -> list[tuple]:
    rng = np.random.default_rng([seed, 101, c])
    kinds = ("line", "arc", "dot")
    strokes = []
    for s in range(3):
        kind = kinds[(c + s * (1 + c // 3)) % 3]
        if kind == "line":
            strokes.append(("line", *rng.uniform(-0.7, 0.7, 4)))
        elif kind == "arc":
            strokes.append(("arc", *rng.uniform(-0.3, 0.3, 2), rng.uniform(0.25, 0.55),
                            rng.uniform(0, 2 * np.pi), rng.uniform(0.8, 1.6) * np.pi))
        else:
            strokes.append(("dot", *rng.uniform(-0.6, 0.6, 2), rng.uniform(0.08, 0.15)))
    return strokes


def render_glyph(template, size: int, rng: np.random.Generator) -> np.ndarray:
    angle = rng.uniform(-0.2, 0.2)
    scale = rng.uniform(0.85, 1.1)
    tx, ty = rng.uniform(-0.1, 0.1, 2)
    thick = rng.uniform(0.06, 0.1)
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    u = (xs + 0.5) / size * 2 - 1 - tx
    v = (ys + 0.5) / size * 2 - 1 - ty
    ca, sa = np.cos(angle), np.sin(angle)
    px = (ca * u + sa * v) / scale
    py = (-sa * u + ca * v) / scale
    d = np.full((size, size), np.inf)
    for stroke in template:
        kind, *p = stroke
        jit = rng.uniform(-0.05, 0.05, len(p))
        if kind == "line":
            ax, ay, bx, by = np.add(p, jit)
            d = np.minimum(d, _seg_dist(px, py, ax, ay, bx, by))
        elif kind == "arc":
            cx, cy, r, a0, sweep = p
            d = np.minimum(d, _arc_dist(px, py, cx + jit[0], cy + jit[1], r, a0 + jit[3] * 4,
                                        a0 + jit[3] * 4 + sweep))
        else:
            cx, cy, r = p
            d = np.minimum(d, np.maximum(np.hypot(px - cx - jit[0], py - cy - jit[1]) - r, 0))
    aa = 2.0 / size
    img = np.clip(1 - (d - thick) / aa, 0, 1)
    img = img + rng.normal(0, 0.03, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def synth_glyphs(n_classes: int, n_per_class: int, size: int = 32, seed: int = 0,
                 val_frac: float = 0.25) -> DatasetManifest:
    """Procedural stroke glyphs: each class is three strokes (lines, arcs, dots) with
    per-sample pose, thickness and position jitter. Light strokes on black."""
    if not 2 <= n_classes <= 36:
        raise ConfigError(f"n_classes must lie in [2, 36], got {n_classes}")
    if n_per_class < 1 or size < 4:
        raise ConfigError("need n_per_class >= 1 and size >= 4")
    images = np.empty((n_classes * n_per_class, size, size), np.float32)
    labels, sources = [], []
    for c in range(n_classes):
        template = _glyph_template(seed, c)
        for j in range(n_per_class):
            k = c * n_per_class + j
            images[k] = render_glyph(template, size, np.random.default_rng([seed, 202, c, j]))
            labels.append(c)
            sources.append(f"synth:{c}:{j}")
    train, val = stratified_split(labels, val_frac, seed)
    classes = [f"glyph{c:02d}" for c in range(n_classes)]
    origin = {"kind": "synthetic", "n_classes": n_classes, "n_per_class": n_per_class,
              "size": size, "seed": seed, "val_frac": val_frac}
    return DatasetManifest(classes, sources, np.array(labels), train, val, seed, images, origin)


def manifest_from_origin(origin: dict) -> DatasetManifest:
    """Rebuild a manifest from its ``origin`` record (stored in checkpoints)."""
    kind = origin.get("kind")
    if kind == "synthetic":
        return synth_glyphs(origin["n_classes"], origin["n_per_class"], origin["size"],
                            origin["seed"], origin.get("val_frac", 0.25))
    if kind == "folder":
        return load_image_folder(origin["root"], origin.get("val_frac", 0.25), origin.get("seed", 0))
    raise DataError(f"cannot rebuild dataset from origin {origin!r}")


# -- batching ------------------------------------------------------------------

def batch_order(indices: np.ndarray, key) -> np.ndarray:
    """Shuffled copy of ``indices`` determined entirely by ``key``."""
    return np.random.default_rng(key).permutation(indices)


def make_batch(manifest: DatasetManifest, idx, image_size: int,
               augment_cfg: AugmentConfig | None = None, key=None) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(key) if augment_cfg is not None else None
    x = np.empty((len(idx), 1, image_size, image_size), np.float32)
    for r, i in enumerate(idx):
        img = manifest.image(int(i))
        if augment_cfg is not None:
            img = augment(img, augment_cfg, rng)
        x[r, 0] = resize(img, image_size)
    return x, manifest.labels[np.asarray(idx, dtype=np.int64)]


def iter_batches(manifest: DatasetManifest, indices, batch_size: int, image_size: int,
                 shuffle_key=None, augment_cfg: AugmentConfig | None = None):
    """Yield ``(x, y)`` minibatches; shuffled by ``shuffle_key`` when given.

    The last batch may be short. Augmentation for batch ``b`` draws from
    ``(*shuffle_key, b)``.
    """
    if batch_size <= 0:
        raise ConfigError("batch_size must be positive")
    indices = np.asarray(indices)
    order = batch_order(indices, shuffle_key) if shuffle_key is not None else indices
    base = tuple(shuffle_key) if shuffle_key is not None else (0,)
    for b, start in enumerate(range(0, order.size, batch_size)):
        yield make_batch(manifest, order[start:start + batch_size], image_size, augment_cfg, (*base, b))
