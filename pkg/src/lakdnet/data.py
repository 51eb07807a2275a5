"""Synthetic blurry/sharp pairs: procedural textures blurred by normalised kernels."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class BlurSpec:
    """``kind`` is "gaussian" (size = sigma) or "disk" (size = radius).

    Each sample draws its size uniformly from ``[size, size_max]``.
    """

    kind: str = "gaussian"
    size: float = 1.0
    size_max: Optional[float] = 2.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "disk"):
            raise ValueError(f"unknown blur kind {self.kind!r}")
        if self.size < 0 or (self.size_max is not None and self.size_max < self.size):
            raise ValueError("blur size range is invalid")


def gaussian_kernel(sigma: float) -> np.ndarray:
    if sigma <= 0:
        return np.ones((1, 1))
    r = max(1, int(math.ceil(3.0 * sigma)))
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def disk_kernel(radius: float) -> np.ndarray:
    if radius <= 0:
        return np.ones((1, 1))
    r = int(math.ceil(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    k = (xx ** 2 + yy ** 2 <= radius ** 2).astype(np.float64)
    return k / k.sum()


def make_kernel(kind: str, size: float) -> np.ndarray:
    return gaussian_kernel(size) if kind == "gaussian" else disk_kernel(size)


def blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Correlate each channel of ``[C, H, W]`` with ``kernel`` under reflect padding."""
    kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel support must be odd")
    ry, rx = kh // 2, kw // 2
    src = np.pad(np.asarray(img, dtype=np.float64), ((0, 0), (ry, ry), (rx, rx)), mode="reflect")
    _, H, W = img.shape
    out = np.zeros(img.shape, np.float64)
    for i in range(kh):
        for j in range(kw):
            if kernel[i, j] != 0:
                out += kernel[i, j] * src[:, i:i + H, j:j + W]
    return out.astype(np.float32)


def procedural_image(rng: np.random.Generator, size: int = 64, channels: int = 3) -> np.ndarray:
    """Sharp synthetic scene: smooth background, flat shapes, and a stripe patch."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.empty((channels, size, size))
    for c in range(channels):
        a, b, o = rng.uniform(-0.4, 0.4, 3)
        img[c] = 0.5 + a * xx + b * yy + 0.1 * o
    for _ in range(rng.integers(4, 9)):
        color = rng.uniform(0, 1, channels)[:, None, None]
        cy, cx = rng.uniform(0, 1, 2)
        shape = rng.integers(3)
        if shape == 0:
            h, w = rng.uniform(0.08, 0.4, 2)
            mask = (np.abs(yy - cy) < h / 2) & (np.abs(xx - cx) < w / 2)
        elif shape == 1:
            r = rng.uniform(0.05, 0.25)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
        else:
            theta = rng.uniform(0, math.pi)
            d = (yy - cy) * math.cos(theta) - (xx - cx) * math.sin(theta)
            mask = np.abs(d) < rng.uniform(0.01, 0.04)
        img = np.where(mask[None], color, img)
    # a patch of fine stripes
    cy, cx = rng.uniform(0.2, 0.8, 2)
    period = rng.uniform(0.05, 0.12)
    theta = rng.uniform(0, math.pi)
    stripes = (np.sin(2 * math.pi * ((yy * math.cos(theta) + xx * math.sin(theta)) / period)) > 0)
    box = (np.abs(yy - cy) < 0.15) & (np.abs(xx - cx) < 0.15)
    contrast = rng.uniform(0.3, 0.7)
    img = np.where((box & stripes)[None], np.clip(img + contrast, 0, 1), img)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def procedural_source(n: int, size: int = 64, channels: int = 3, rng_seed: int = 0) -> List[np.ndarray]:
    rng = np.random.default_rng(rng_seed)
    return [procedural_image(rng, size, channels) for _ in range(n)]


@dataclass
class PairDataset:
    blurry: List[np.ndarray]
    sharp: List[np.ndarray]

    def __len__(self) -> int:
        return len(self.sharp)

    def stacked(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.stack(self.blurry), np.stack(self.sharp)

    def sample_batch(self, rng: np.random.Generator, batch: int, patch: int) -> Tuple[np.ndarray, np.ndarray]:
        """Random crops lying fully inside randomly chosen images."""
        c = self.sharp[0].shape[0]
        xb = np.empty((batch, self.blurry[0].shape[0], patch, patch), np.float32)
        yb = np.empty((batch, c, patch, patch), np.float32)
        for k in range(batch):
            i = int(rng.integers(len(self)))
            _, H, W = self.sharp[i].shape
            if H < patch or W < patch:
                raise DataError(f"image {i} ({H}x{W}) smaller than patch {patch}")
            y = int(rng.integers(H - patch + 1))
            x = int(rng.integers(W - patch + 1))
            xb[k] = self.blurry[i][:, y:y + patch, x:x + patch]
            yb[k] = self.sharp[i][:, y:y + patch, x:x + patch]
        return xb, yb


def synth_dataset(sharp_source, spec: BlurSpec, n: Optional[int] = None) -> PairDataset:
    """Blur ``n`` sharp images (a list of arrays or a directory of PGM/PPM files).

    Images are reused cyclically when ``n`` exceeds the source size.
    """
    if isinstance(sharp_source, (str, os.PathLike)):
        from .imageio import load_image_dir
        images = load_image_dir(sharp_source)
    else:
        images = list(sharp_source)
    if not images:
        raise DataError("sharp source is empty")
    n = len(images) if n is None else n
    rng = np.random.default_rng(spec.rng_seed)
    blurry, sharp = [], []
    for k in range(n):
        img = np.asarray(images[k % len(images)], dtype=np.float32)
        hi = spec.size if spec.size_max is None else spec.size_max
        size = spec.size if hi == spec.size else float(rng.uniform(spec.size, hi))
        blurry.append(blur(img, make_kernel(spec.kind, size)))
        sharp.append(img)
    return PairDataset(blurry, sharp)
