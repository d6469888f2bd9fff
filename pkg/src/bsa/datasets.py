"""Procedural toy corpora, image-folder I/O and Gram-matrix subset selection."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ArgumentError, ConfigurationError, DataError, ShapeError

SHAPES = ("circle", "square", "triangle", "cross", "diamond")
COLORS = (
    (0.90, 0.15, 0.15),  # red
    (0.15, 0.80, 0.20),  # green
    (0.20, 0.35, 0.95),  # blue
    (0.95, 0.85, 0.15),  # yellow
    (0.85, 0.20, 0.85),  # magenta
    (0.15, 0.85, 0.90),  # cyan
)
STYLES = ("shapes", "shapes-alt-style")
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp")
MANIFEST_NAME = "manifest.txt"


@dataclass
class ImageSet:
    """A stack of channel-first images with values in [0, 1].

    Attributes:
        images: float32 array of shape (N, C, H, W).
        labels: optional int64 array of shape (N,).
        name: free-form identifier.
        num_classes: declared class count; inferred from labels when omitted.
    """

    images: np.ndarray
    labels: Optional[np.ndarray] = None
    name: str = "images"
    num_classes: Optional[int] = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        if images.ndim != 4:
            raise ShapeError(f"images must be (N, C, H, W), got shape {images.shape}")
        if images.shape[0] == 0:
            raise DataError("image set is empty")
        if not np.all(np.isfinite(images)) or images.min() < 0.0 or images.max() > 1.0:
            raise DataError("pixel values must lie in [0, 1]")
        self.images = images
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (images.shape[0],):
                raise ShapeError(
                    f"labels shape {labels.shape} does not match {images.shape[0]} images"
                )
            if labels.min() < 0:
                raise DataError("labels must be non-negative")
            if self.num_classes is None:
                self.num_classes = int(labels.max()) + 1
            elif labels.max() >= self.num_classes:
                raise DataError(
                    f"label {int(labels.max())} out of range for {self.num_classes} classes"
                )
            self.labels = labels

    def __len__(self):
        return self.images.shape[0]

    @property
    def shape(self):
        """Per-image (C, H, W)."""
        return self.images.shape[1:]

    def subset(self, indices, name=None) -> "ImageSet":
        idx = np.asarray(indices, dtype=np.int64)
        return ImageSet(
            self.images[idx].copy(),
            None if self.labels is None else self.labels[idx].copy(),
            name or self.name,
            self.num_classes,
        )

    def to_signed(self):
        """Images rescaled to the generator range [-1, 1]."""
        return self.images * 2.0 - 1.0


@dataclass(frozen=True)
class ToyCorpusSpec:
    num_classes: int = 10
    images_per_class: int = 100
    image_size: int = 32
    seed: int = 0
    style: str = "shapes"

    def validate(self):
        if self.num_classes < 1 or self.num_classes > len(SHAPES) * len(COLORS):
            raise ConfigurationError(
                f"num_classes must be in [1, {len(SHAPES) * len(COLORS)}], got {self.num_classes}"
            )
        if self.images_per_class < 1:
            raise ConfigurationError("images_per_class must be >= 1")
        if self.image_size not in (16, 32, 64):
            raise ConfigurationError(f"image_size must be 16, 32 or 64, got {self.image_size}")
        if self.style not in STYLES:
            raise ConfigurationError(f"unknown style {self.style!r}; expected one of {STYLES}")


def class_shape_color(class_index: int):
    """Map a class index to its (shape, color) indices.

    Shapes and colors advance together so consecutive classes differ in both;
    since the two counts are coprime the first 30 classes are all distinct.
    """
    return class_index % len(SHAPES), class_index % len(COLORS)


def shape_categories(num_classes: int) -> np.ndarray:
    """Category label (shape index) for each class, used for purity analysis."""
    return np.array([class_shape_color(c)[0] for c in range(num_classes)], dtype=np.int64)


def _signed_distance(shape, px, py, cx, cy, r):
    # Approximate signed distance in pixels, negative inside.
    dx, dy = px - cx, py - cy
    ax, ay = np.abs(dx), np.abs(dy)
    if shape == "circle":
        return np.hypot(dx, dy) - r
    if shape == "square":
        return np.maximum(ax, ay) - 0.8 * r
    if shape == "diamond":
        return (ax + ay - 1.15 * r) / np.sqrt(2.0)
    if shape == "cross":
        w = 0.35 * r
        return np.minimum(np.maximum(ax - w, ay - r), np.maximum(ay - w, ax - r))
    if shape == "triangle":
        # Upward equilateral triangle inscribed in the circle of radius r.
        s3 = np.sqrt(3.0)
        e1 = dy - 0.5 * r
        e2 = (s3 * dx - dy) / 2.0 - 0.5 * r
        e3 = (-s3 * dx - dy) / 2.0 - 0.5 * r
        return np.maximum(e1, np.maximum(e2, e3))
    raise ConfigurationError(f"unknown shape {shape!r}")


def render_shape(
    size: int,
    shape: str,
    color,
    center,
    radius: float,
    background,
    outline: bool = False,
) -> np.ndarray:
    """Render one anti-aliased shape into a (3, size, size) float32 image."""
    coords = np.arange(size, dtype=np.float64) + 0.5
    px, py = np.meshgrid(coords, coords)
    d = _signed_distance(shape, px, py, center[0], center[1], radius)
    if outline:
        width = max(1.5, size / 16.0)
        alpha = np.clip(width / 2.0 + 0.5 - np.abs(d), 0.0, 1.0)
    else:
        alpha = np.clip(0.5 - d, 0.0, 1.0)
    bg = np.asarray(background, dtype=np.float64)[:, None, None]
    fg = np.asarray(color, dtype=np.float64)[:, None, None]
    img = bg * (1.0 - alpha) + fg * alpha
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_toy_corpus(spec: ToyCorpusSpec) -> ImageSet:
    """Render ``num_classes * images_per_class`` labeled shape images.

    Each class is a fixed (shape, color) pair; position, scale, color jitter
    and background vary per image. Output is class-major and bit-identical for
    equal specs.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    outline = spec.style == "shapes-alt-style"
    images = np.empty((spec.num_classes * spec.images_per_class, 3, size, size), np.float32)
    labels = np.empty(len(images), np.int64)
    i = 0
    for c in range(spec.num_classes):
        shape_idx, color_idx = class_shape_color(c)
        for _ in range(spec.images_per_class):
            center = rng.uniform(0.35, 0.65, size=2) * size
            radius = rng.uniform(0.2, 0.3) * size
            color = np.clip(np.asarray(COLORS[color_idx]) + rng.uniform(-0.06, 0.06, 3), 0, 1)
            level = rng.uniform(0.05, 0.35)
            background = np.clip(level + rng.uniform(-0.04, 0.04, 3), 0, 1)
            images[i] = render_shape(
                size, SHAPES[shape_idx], color, center, radius, background, outline
            )
            labels[i] = c
            i += 1
    name = f"toy-{spec.style}-c{spec.num_classes}-n{spec.images_per_class}-s{spec.seed}"
    return ImageSet(images, labels, name, spec.num_classes)


def _list_image_files(path: Path):
    return sorted(
        p for p in path.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )


def _read_manifest(path: Path):
    manifest = path / MANIFEST_NAME
    if not manifest.exists():
        return None
    labels = {}
    for line in manifest.read_text().splitlines():
        parts = line.split()
        if len(parts) == 2:
            labels[parts[0]] = int(parts[1])
    return labels


def load_image_folder(path, image_size: int, name: Optional[str] = None) -> ImageSet:
    """Load every decodable image in ``path`` (lexicographic order) as RGB.

    Images are bilinearly resized to ``image_size`` squares. Undecodable files
    are skipped with a warning. Labels are taken from a ``manifest.txt`` when
    one exists and covers every loaded file.
    """
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"{path} is not a directory")
    files = _list_image_files(path)
    if not files:
        raise DataError(f"no image files in {path}")
    arrays, kept = [], []
    for f in files:
        try:
            with Image.open(f) as im:
                im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32) / 255.0
        except (UnidentifiedImageError, OSError) as exc:
            warnings.warn(f"skipping undecodable image {f.name}: {exc}")
            continue
        arrays.append(arr.transpose(2, 0, 1))
        kept.append(f.name)
    if not arrays:
        raise DataError(f"none of the {len(files)} files in {path} could be decoded")
    labels = None
    manifest = _read_manifest(path)
    if manifest is not None and all(k in manifest for k in kept):
        labels = np.array([manifest[k] for k in kept], dtype=np.int64)
    return ImageSet(np.stack(arrays), labels, name or path.name)


def save_image_folder(images: ImageSet, path) -> list[str]:
    """Write one PNG per image plus a manifest of ``filename class`` lines."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = []
    width = max(5, len(str(len(images))))
    for i, img in enumerate(images.images):
        fname = f"{i:0{width}d}.png"
        arr = np.round(img.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(path / fname)
        names.append(fname)
    labels = images.labels if images.labels is not None else np.full(len(images), -1)
    with open(path / MANIFEST_NAME, "w") as fh:
        for fname, lab in zip(names, labels):
            fh.write(f"{fname} {int(lab)}\n")
    return names


def gram_matrices(features: np.ndarray) -> np.ndarray:
    """Normalized Gram matrices of (N, C, H, W) feature maps -> (N, C, C)."""
    n, c, h, w = features.shape
    flat = features.reshape(n, c, h * w).astype(np.float64)
    return np.einsum("nci,ndi->ncd", flat, flat) / (c * h * w)


def gram_distances(pool: ImageSet, seed_index: int, extractor, layer: Optional[str] = None):
    """Frobenius distance between every pool image's Gram matrix and the seed's."""
    feats = extractor.tap_numpy(pool.to_signed(), layer or extractor.gram_layer)
    grams = gram_matrices(feats)
    return np.sqrt(((grams - grams[seed_index]) ** 2).sum(axis=(1, 2)))


def select_by_gram(
    pool: ImageSet,
    seed_index: int,
    k: int,
    extractor,
    layer: Optional[str] = None,
) -> ImageSet:
    """Pick the ``k`` images whose Gram matrices are closest to the seed image's.

    The seed comes first; the rest follow in increasing distance with ties
    broken by lower pool index. ``layer`` defaults to the extractor's mid-depth
    Gram tap.
    """
    n = len(pool)
    if not 1 <= k <= n:
        raise ArgumentError(f"k must be in [1, {n}], got {k}")
    if not 0 <= seed_index < n:
        raise ArgumentError(f"seed_index {seed_index} out of range for pool of {n}")
    dist = gram_distances(pool, seed_index, extractor, layer)
    others = [i for i in range(n) if i != seed_index]
    others.sort(key=lambda i: (dist[i], i))
    chosen = [seed_index] + others[: k - 1]
    return pool.subset(chosen, name=f"{pool.name}-gram{seed_index}-k{k}")


def subsample(pool: ImageSet, size: int, seed: int, name: Optional[str] = None) -> ImageSet:
    """Uniform subset of ``size`` images without replacement, fixed by ``seed``."""
    if size > len(pool) or size < 1:
        raise ArgumentError(f"cannot draw {size} images from a pool of {len(pool)}")
    idx = np.sort(np.random.default_rng(seed).choice(len(pool), size=size, replace=False))
    return pool.subset(idx, name=name or f"{pool.name}-sub{size}-s{seed}")
