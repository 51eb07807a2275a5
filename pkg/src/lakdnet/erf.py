"""Effective receptive field probing.

A probe seeds the backward pass with 1 on every channel of the centre pixel of
a feature map, takes the absolute input gradient summed over input channels,
and averages that map over many input patches.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .autodiff import Tensor, backward, mul, sum_all
from .model import LAYER_NAMES, NetworkConfig, Params, features_at, frozen

FeatureFn = Callable[[Tensor], Tensor]

SCANLINE_HALF_RANGE = 30.0
PGM_LOG_GAIN = 1000.0


@dataclass
class ErfMap:
    values: np.ndarray  # [H, W] float64, non-negative
    patch_count: int
    layer_name: str = "custom"

    @property
    def max_value(self) -> float:
        return float(self.values.max())

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass
class ErfProfile:
    xs: np.ndarray
    ys: np.ndarray
    max_value: float
    layer_name: str = "custom"


@dataclass(frozen=True)
class Box:
    """Inclusive pixel bounds; ``top > bottom`` marks an empty box."""

    top: int
    left: int
    bottom: int
    right: int

    @property
    def is_empty(self) -> bool:
        return self.top > self.bottom

    @property
    def height(self) -> int:
        return 0 if self.is_empty else self.bottom - self.top + 1

    @property
    def width(self) -> int:
        return 0 if self.is_empty else self.right - self.left + 1

    def contains(self, other: "Box") -> bool:
        if other.is_empty:
            return True
        if self.is_empty:
            return False
        return (self.top <= other.top and self.left <= other.left
                and self.bottom >= other.bottom and self.right >= other.right)

    def strictly_contains(self, other: "Box") -> bool:
        return self.contains(other) and self != other


EMPTY_BOX = Box(0, 0, -1, -1)


# ---------------------------------------------------------------------------
# Input sources
# ---------------------------------------------------------------------------


def _patch_sampler(input_source, in_channels: int, patch: int) -> Callable:
    """Return ``draw(rng, n) -> float32 [n, C, patch, patch]``."""
    if input_source is None:
        def draw(rng, n):
            return rng.random((n, in_channels, patch, patch), dtype=np.float32)
        return draw

    if isinstance(input_source, (str, os.PathLike)):
        from .imageio import load_image_dir
        images = load_image_dir(input_source)
    else:
        images = list(input_source)
    if not images:
        raise ValueError("input_source holds no images")
    for img in images:
        if img.shape[0] != in_channels or min(img.shape[1:]) < patch:
            raise ValueError(f"image of shape {img.shape} cannot give {in_channels}x{patch}x{patch} patches")

    def draw(rng, n):
        out = np.empty((n, in_channels, patch, patch), np.float32)
        for k in range(n):
            img = images[rng.integers(len(images))]
            y = rng.integers(img.shape[1] - patch + 1)
            x = rng.integers(img.shape[2] - patch + 1)
            out[k] = img[:, y:y + patch, x:x + patch]
        return out
    return draw


# ---------------------------------------------------------------------------
# Probing
# ---------------------------------------------------------------------------


def erf_gradients(feature_fn: FeatureFn, batch: np.ndarray) -> np.ndarray:
    """Per-sample ``sum_c |d(centre of feature map)/d input|``, shape [N, H, W].

    Samples must not interact inside ``feature_fn`` (true for every layer here),
    so one backward pass serves the whole batch.
    """
    x = Tensor(batch, requires_grad=True)
    feats = feature_fn(x)
    if feats.ndim != 4:
        raise ValueError(f"probed feature map must be NCHW, got {feats.shape}")
    mask = np.zeros(feats.shape, np.float32)
    mask[:, :, feats.shape[2] // 2, feats.shape[3] // 2] = 1.0
    backward(sum_all(mul(feats, Tensor(mask))))
    if x.grad is None:
        return np.zeros((batch.shape[0],) + batch.shape[2:])
    return np.abs(x.grad.astype(np.float64)).sum(axis=1)


def compute_erf(
    feature_fn: FeatureFn,
    in_channels: int,
    patch: int,
    n_patches: int,
    input_source=None,
    rng_seed: int = 0,
    layer: str = "custom",
    batch_size: int = 4,
) -> ErfMap:
    """Average absolute-gradient map of ``feature_fn``'s centre over ``n_patches`` inputs."""
    if n_patches < 1:
        raise ValueError("n_patches must be >= 1")
    draw = _patch_sampler(input_source, in_channels, patch)
    rng = np.random.default_rng(rng_seed)
    total = np.zeros((patch, patch), np.float64)
    done = 0
    while done < n_patches:
        n = min(batch_size, n_patches - done)
        grads = erf_gradients(feature_fn, draw(rng, n))
        for g in grads:  # ordered reduction
            total += g
        done += n
    return ErfMap(values=total / n_patches, patch_count=n_patches, layer_name=layer)


def lakdnet_feature_fn(params: Params, config: NetworkConfig, layer: str = "bt_neck") -> FeatureFn:
    if layer not in LAYER_NAMES:
        raise ValueError(f"unknown layer {layer!r}; choose from {LAYER_NAMES}")
    ro = frozen(params)
    return lambda x: features_at(x, ro, config, layer)


def probe_lakdnet(
    params: Params,
    config: NetworkConfig,
    layer: str = "bt_neck",
    patch: int = 64,
    n_patches: int = 8,
    input_source=None,
    rng_seed: int = 0,
    batch_size: int = 4,
) -> ErfMap:
    fn = lakdnet_feature_fn(params, config, layer)
    d = config.spatial_divisor
    if patch < d or patch % d:
        raise ValueError(f"patch size {patch} must be a positive multiple of {d} for this network")
    return compute_erf(fn, config.in_channels, patch, n_patches, input_source, rng_seed, layer, batch_size)


def merge_erf(maps) -> ErfMap:
    """Patch-count-weighted average of maps probed on disjoint patch sets."""
    maps = list(maps)
    n = sum(m.patch_count for m in maps)
    total = np.zeros_like(maps[0].values)
    for m in maps:
        total += m.values * m.patch_count
    return ErfMap(values=total / n, patch_count=n, layer_name=maps[0].layer_name)


# ---------------------------------------------------------------------------
# Scanline and support
# ---------------------------------------------------------------------------


def scanline_coords(width: int) -> np.ndarray:
    if width == 1:
        return np.zeros(1)
    return -SCANLINE_HALF_RANGE + 2 * SCANLINE_HALF_RANGE * np.arange(width) / (width - 1)


def extract_scanline(erf_map: ErfMap) -> ErfProfile:
    """Centre row (``floor(H/2)``) on the rescaled axis [-30, 30]."""
    H, W = erf_map.values.shape
    if H < 1:
        raise ValueError("empty ERF map")
    ys = erf_map.values[H // 2].astype(np.float64).copy()
    return ErfProfile(xs=scanline_coords(W), ys=ys, max_value=erf_map.max_value, layer_name=erf_map.layer_name)


def erf_support(erf_map: Union[ErfMap, np.ndarray], threshold: float = 0.0) -> Box:
    """Tight bounding box of entries strictly above ``threshold``."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    values = erf_map.values if isinstance(erf_map, ErfMap) else np.asarray(erf_map)
    rows = np.flatnonzero((values > threshold).any(axis=1))
    if rows.size == 0:
        return EMPTY_BOX
    cols = np.flatnonzero((values > threshold).any(axis=0))
    return Box(int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

RAW_NAME, SIDECAR_NAME, PGM_NAME = "erf.f32", "erf.json", "erf.pgm"


def log_normalized(values: np.ndarray) -> np.ndarray:
    """Map to [0, 1] with ``log1p(gain * v / max) / log1p(gain)``; display only."""
    peak = float(values.max())
    if peak <= 0:
        return np.zeros_like(values, dtype=np.float64)
    return np.log1p(PGM_LOG_GAIN * values / peak) / math.log1p(PGM_LOG_GAIN)


def save_erf(erf_map: ErfMap, out_dir) -> None:
    from .imageio import write_pnm

    os.makedirs(out_dir, exist_ok=True)
    H, W = erf_map.values.shape
    erf_map.values.astype("<f4").tofile(os.path.join(out_dir, RAW_NAME))
    sidecar = {
        "height": H,
        "width": W,
        "patch_count": erf_map.patch_count,
        "layer": erf_map.layer_name,
        "max_value": erf_map.max_value,
    }
    with open(os.path.join(out_dir, SIDECAR_NAME), "w") as fh:
        json.dump(sidecar, fh, indent=2)
    write_pnm(os.path.join(out_dir, PGM_NAME), log_normalized(erf_map.values)[None])


def load_erf(in_dir) -> ErfMap:
    with open(os.path.join(in_dir, SIDECAR_NAME)) as fh:
        meta = json.load(fh)
    raw = np.fromfile(os.path.join(in_dir, RAW_NAME), dtype="<f4")
    H, W = int(meta["height"]), int(meta["width"])
    if raw.size != H * W:
        raise ValueError(f"{RAW_NAME} holds {raw.size} floats, sidecar says {H}x{W}")
    return ErfMap(values=raw.reshape(H, W).astype(np.float64), patch_count=int(meta["patch_count"]),
                  layer_name=meta["layer"])
