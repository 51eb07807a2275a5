"""Charbonnier training loss and PSNR."""
from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, add, mean, mul, sqrt, sub

CHARBONNIER_EPS = 1e-3


def charbonnier_loss(pred: Tensor, target: Tensor, eps: float = CHARBONNIER_EPS) -> Tensor:
    """Mean of ``sqrt((pred - target)**2 + eps**2)``."""
    if pred.shape != target.shape:
        raise ValueError(f"charbonnier_loss: shape mismatch {pred.shape} vs {target.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = sub(pred, target)
    return mean(sqrt(add(mul(d, d), eps * eps)))


def psnr(pred, target, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; identical inputs give ``inf``."""
    p = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    t = np.asarray(getattr(target, "data", target), dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"psnr: shape mismatch {p.shape} vs {t.shape}")
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)
