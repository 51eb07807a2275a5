"""AdamW with decoupled weight decay and a cosine-annealed learning rate."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .autodiff import Tensor

ADAM_EPS = 1e-8


def cosine_lr(t: float, total: int, lr_max: float = 3e-4, lr_min: float = 1e-6) -> float:
    if total <= 0 or t >= total:
        return lr_min
    t = max(t, 0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Dict[str, Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros(p.shape, np.float32) for k, p in params.items()},
            v={k: np.zeros(p.shape, np.float32) for k, p in params.items()},
        )


def adamw_step(
    params: Dict[str, Tensor],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    t: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    weight_decay: float = 1e-4,
    eps: float = ADAM_EPS,
) -> None:
    """In-place update: shrink by ``1 - lr*wd``, then a bias-corrected Adam step."""
    if t < 1:
        raise ValueError("AdamW step index starts at 1")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        theta = p.data.astype(np.float64)
        theta *= 1.0 - lr * weight_decay
        if g is not None:
            g = g.astype(np.float64)
            m = beta1 * state.m[name] + (1.0 - beta1) * g
            v = beta2 * state.v[name] + (1.0 - beta2) * g * g
            theta -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
            state.m[name] = m.astype(np.float32)
            state.v[name] = v.astype(np.float32)
        p.data = theta.astype(np.float32)
    state.step = t
