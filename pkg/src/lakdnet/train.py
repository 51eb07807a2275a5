"""Training loop, evaluation, checkpoints and tiled inference."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import Tensor, backward
from .data import PairDataset
from .imageio import load_checkpoint, save_checkpoint
from .losses import CHARBONNIER_EPS, charbonnier_loss, psnr
from .model import ConfigError, NetworkConfig, Params, frozen, init_params, lakdnet_forward
from .optim import AdamState, adamw_step, cosine_lr

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss; ``params`` holds the last good state."""

    def __init__(self, message: str, iteration: int, params: Params):
        super().__init__(message)
        self.iteration = iteration
        self.params = params


DESK_SCHEDULE = ((0, 32, 8), (400, 48, 4), (800, 64, 2))


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 3e-4
    lr_min: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 1e-4
    total_iters: int = 1200
    patch_schedule: Tuple[Tuple[int, int, int], ...] = DESK_SCHEDULE
    charbonnier_eps: float = CHARBONNIER_EPS
    rng_seed: int = 0
    checkpoint_every: int = 0  # 0: only the final checkpoint
    zero_init_output: bool = True  # start from the identity map

    def __post_init__(self):
        sched = tuple(tuple(int(v) for v in row) for row in self.patch_schedule)
        object.__setattr__(self, "patch_schedule", sched)
        if not 0 < self.lr_min <= self.lr_max:
            raise ConfigError(f"need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.total_iters < 0:
            raise ConfigError("total_iters must be non-negative")
        if not sched or sched[0][0] != 0:
            raise ConfigError("patch_schedule must start at iteration 0")
        for row in sched:
            if len(row) != 3:
                raise ConfigError(f"schedule rows are (iteration, patch, batch), got {row}")
            if row[1] % 8 or row[1] <= 0 or row[2] <= 0:
                raise ConfigError(f"patch sizes must be positive multiples of 8 and batches positive, got {row}")
        its = [row[0] for row in sched]
        if any(b <= a for a, b in zip(its, its[1:])):
            raise ConfigError(f"schedule iterations must be strictly increasing, got {its}")
        if self.charbonnier_eps <= 0:
            raise ConfigError("charbonnier_eps must be positive")

    def stage(self, iteration: int) -> Tuple[int, int]:
        """(patch, batch) in force at 0-based ``iteration``."""
        patch, batch = self.patch_schedule[0][1:]
        for it, p, b in self.patch_schedule:
            if iteration >= it:
                patch, batch = p, b
        return patch, batch

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["patch_schedule"] = [list(r) for r in self.patch_schedule]
        return d


def split_config(doc: dict) -> Tuple[NetworkConfig, TrainConfig]:
    """Split a flat JSON object into network and training configs; unknown keys are rejected."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    net_keys = {f.name for f in dataclasses.fields(NetworkConfig)}
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(doc) - net_keys - train_keys
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        net = NetworkConfig(**{k: v for k, v in doc.items() if k in net_keys})
        tr = TrainConfig(**{k: v for k, v in doc.items() if k in train_keys})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return net, tr


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def checkpoint_entries(params: Params, state: Optional[AdamState] = None) -> Dict[str, np.ndarray]:
    entries = {name: p.data for name, p in params.items()}
    if state is not None:
        for name in params:
            entries[f"adam.m/{name}"] = state.m[name]
            entries[f"adam.v/{name}"] = state.v[name]
        entries["adam.step"] = np.array([state.step], np.float32)
    return entries


def save_model(path, params: Params, config: NetworkConfig, state: Optional[AdamState] = None) -> None:
    save_checkpoint(path, checkpoint_entries(params, state))
    with open(f"{path}.json", "w") as fh:
        fh.write(config.to_json())


def load_model(path, requires_grad: bool = False) -> Tuple[Params, NetworkConfig, Optional[AdamState]]:
    entries = load_checkpoint(path)
    with open(f"{path}.json") as fh:
        config = NetworkConfig.from_json(fh.read())
    expected = init_params(config, 0, requires_grad=False)
    params = {}
    for name, ref in expected.items():
        if name not in entries:
            raise ValueError(f"checkpoint lacks parameter {name!r}")
        if entries[name].shape != ref.shape:
            raise ValueError(f"parameter {name!r} has shape {entries[name].shape}, expected {ref.shape}")
        params[name] = Tensor(entries[name].copy(), requires_grad=requires_grad)
    state = None
    if "adam.step" in entries:
        state = AdamState(
            m={n: entries[f"adam.m/{n}"].copy() for n in params},
            v={n: entries[f"adam.v/{n}"].copy() for n in params},
            step=int(entries["adam.step"][0]),
        )
    return params, config, state


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: Params
    state: AdamState
    losses: List[float] = field(default_factory=list)


def train(
    net_config: NetworkConfig,
    train_config: TrainConfig,
    dataset: PairDataset,
    params: Optional[Params] = None,
    out_path=None,
    trace_path=None,
    log_every: int = 100,
) -> TrainResult:
    """Charbonnier-loss AdamW training on random crops; deterministic per seed."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    tc = train_config
    if params is None:
        params = init_params(net_config, tc.rng_seed)
        if tc.zero_init_output:
            params["outro.weight"].data[...] = 0.0
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(tc.rng_seed + 1)
    losses: List[float] = []
    trace_fh = open(trace_path, "w", newline="") if trace_path else None
    writer = csv.writer(trace_fh) if trace_fh else None
    if writer:
        writer.writerow(["iteration", "lr", "patch", "batch", "loss"])
    try:
        for it in range(tc.total_iters):
            patch, batch = tc.stage(it)
            xb, yb = dataset.sample_batch(rng, batch, patch)
            for p in params.values():
                p.grad = None
            pred = lakdnet_forward(Tensor(xb), params, net_config)
            loss = charbonnier_loss(pred, Tensor(yb), tc.charbonnier_eps)
            value = loss.item()
            if not math.isfinite(value):
                if out_path:
                    save_model(out_path, params, net_config, state)
                raise NumericalError(f"non-finite loss at iteration {it + 1}", it + 1, params)
            backward(loss)
            lr = cosine_lr(it, tc.total_iters, tc.lr_max, tc.lr_min)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            adamw_step(params, grads, state, it + 1, lr, tc.adam_beta1, tc.adam_beta2, tc.weight_decay)
            losses.append(value)
            if writer:
                writer.writerow([it + 1, repr(lr), patch, batch, repr(value)])
            if log_every and (it + 1) % log_every == 0:
                logger.info("iter %d/%d  patch %d  batch %d  lr %.2e  loss %.5f",
                            it + 1, tc.total_iters, patch, batch, lr, float(np.mean(losses[-log_every:])))
            if out_path and tc.checkpoint_every and (it + 1) % tc.checkpoint_every == 0:
                save_model(out_path, params, net_config, state)
    finally:
        if trace_fh:
            trace_fh.close()
    if out_path:
        save_model(out_path, params, net_config, state)
    return TrainResult(params, state, losses)


# ---------------------------------------------------------------------------
# Inference and evaluation
# ---------------------------------------------------------------------------


def restore_batch(params: Params, config: NetworkConfig, images: np.ndarray, batch: int = 8) -> np.ndarray:
    ro = frozen(params)
    out = []
    for i in range(0, len(images), batch):
        out.append(lakdnet_forward(Tensor(images[i:i + batch]), ro, config).data)
    return np.concatenate(out)


def evaluate(params: Params, config: NetworkConfig, dataset: PairDataset, batch: int = 8) -> Dict[str, float]:
    """Mean per-image PSNR of restored and of blurry inputs against the sharp targets."""
    blurry, sharp = dataset.stacked()
    restored = np.clip(restore_batch(params, config, blurry, batch), 0.0, 1.0)
    rgb = blurry[:, :3]
    return {
        "psnr_restored": float(np.mean([psnr(r, s) for r, s in zip(restored, sharp)])),
        "psnr_blurry": float(np.mean([psnr(b, s) for b, s in zip(rgb, sharp)])),
    }


def _tile_starts(size: int, tile: int, overlap: int) -> List[int]:
    if size <= tile:
        return [0]
    stride = tile - overlap
    starts = list(range(0, size - tile, stride))
    starts.append(size - tile)
    return starts


def infer_image(params: Params, config: NetworkConfig, img: np.ndarray, tile: int = 256, overlap: int = 16) -> np.ndarray:
    """Restore one ``[C, H, W]`` image tile by tile; overlapping outputs are averaged."""
    d = config.spatial_divisor
    if tile % d or tile <= overlap:
        raise ValueError(f"tile must be a multiple of {d} larger than the overlap")
    C, H, W = img.shape
    if C != config.in_channels:
        raise ValueError(f"image has {C} channels, network expects {config.in_channels}")
    ph, pw = -H % d, -W % d
    mode = "reflect" if min(H, W) > max(ph, pw) else "edge"
    src = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode=mode) if ph or pw else img
    Hp, Wp = src.shape[1:]
    th, tw = min(tile, Hp), min(tile, Wp)
    ro = frozen(params)
    acc = np.zeros((3, Hp, Wp), np.float64)
    weight = np.zeros((Hp, Wp), np.float64)
    for y in _tile_starts(Hp, th, overlap):
        for x in _tile_starts(Wp, tw, overlap):
            patch = src[None, :, y:y + th, x:x + tw]
            acc[:, y:y + th, x:x + tw] += lakdnet_forward(Tensor(patch), ro, config).data[0]
            weight[y:y + th, x:x + tw] += 1.0
    return (acc / weight)[:, :H, :W].astype(np.float32)
