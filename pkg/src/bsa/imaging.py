"""Image grids and PNG output."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image

GUTTER = 2


def to_unit(images_signed: np.ndarray) -> np.ndarray:
    """Map [-1, 1] images to [0, 1]."""
    return np.clip((np.asarray(images_signed) + 1.0) / 2.0, 0.0, 1.0)


def tile_grid(images: np.ndarray, ncol: int | None = None, gutter: int = GUTTER) -> np.ndarray:
    """Row-major tiling of (N, C, H, W) images in [0, 1] with white gutters.

    Returns an (H', W', C) float array.
    """
    images = np.asarray(images, dtype=np.float32)
    n, c, h, w = images.shape
    ncol = ncol or int(math.ceil(math.sqrt(n)))
    nrow = int(math.ceil(n / ncol))
    grid = np.ones((nrow * (h + gutter) + gutter, ncol * (w + gutter) + gutter, c), np.float32)
    for i, img in enumerate(images):
        r, col = divmod(i, ncol)
        y0 = gutter + r * (h + gutter)
        x0 = gutter + col * (w + gutter)
        grid[y0 : y0 + h, x0 : x0 + w] = img.transpose(1, 2, 0)
    return grid


def save_png(array_hwc: np.ndarray, path):
    arr = np.round(np.clip(array_hwc, 0, 1) * 255).astype(np.uint8)
    if arr.shape[-1] == 1:
        arr = arr[..., 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def save_grid(images_signed: np.ndarray, path, ncol: int | None = None):
    """Tile generator-range ([-1, 1]) images and write them as one PNG."""
    save_png(tile_grid(to_unit(images_signed), ncol), path)


def save_frames(images_signed: np.ndarray, directory, prefix: str = "frame") -> list[Path]:
    """One PNG per [-1, 1] image, numbered in order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(to_unit(images_signed)):
        p = directory / f"{prefix}_{i:03d}.png"
        save_png(img.transpose(1, 2, 0), p)
        paths.append(p)
    return paths
