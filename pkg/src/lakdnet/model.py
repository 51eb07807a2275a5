"""LaKD blocks and the four-level U-shaped LaKDNet.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names
(``enc2.1.mix.dw1.weight``); the forward functions are pure over that dict.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Tuple

import numpy as np

from .autodiff import Tensor, add, channel_slice, concat, mul
from .layers import ConvSpec, LayerNormSpec, conv2d, gelu, layer_norm, pixel_shuffle, pixel_unshuffle

Params = Dict[str, Tensor]

INPUT_CHANNELS = {"single": 3, "dual_pixel": 6}
BLOCK_VARIANTS = ("lakd", "dilated")
DILATION_RATES = (1, 2, 3)
LN_EPS = 1e-6

# Probe points, in execution order. ``bt_neck`` is the last encoder level,
# right before the first decoder upsampling.
LAYER_NAMES = ("intro", "enc1", "enc2", "enc3", "bt_neck", "dec3", "dec2", "dec1", "output")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 16
    block_counts: Tuple[int, int, int, int] = (2, 3, 3, 4)
    mixer_kernel: int = 9
    input_mode: str = "single"
    block_variant: str = "lakd"
    shortcut_inner: bool = True
    shortcut_middle: bool = True
    downsample_factor: int = 2

    def __post_init__(self):
        object.__setattr__(self, "block_counts", tuple(int(n) for n in self.block_counts))
        if len(self.block_counts) != 4 or min(self.block_counts) < 1:
            raise ConfigError(f"block_counts must be four counts >= 1, got {self.block_counts}")
        if self.mixer_kernel < 1 or self.mixer_kernel % 2 == 0:
            raise ConfigError(f"mixer_kernel must be odd, got {self.mixer_kernel}")
        if self.base_channels < 4 or self.base_channels % 4:
            raise ConfigError(f"base_channels must be >= 4 and divisible by 4, got {self.base_channels}")
        if self.input_mode not in INPUT_CHANNELS:
            raise ConfigError(f"input_mode must be one of {sorted(INPUT_CHANNELS)}, got {self.input_mode!r}")
        if self.block_variant not in BLOCK_VARIANTS:
            raise ConfigError(f"block_variant must be one of {BLOCK_VARIANTS}, got {self.block_variant!r}")
        if self.downsample_factor < 2:
            raise ConfigError(f"downsample_factor must be >= 2, got {self.downsample_factor}")

    @property
    def in_channels(self) -> int:
        return INPUT_CHANNELS[self.input_mode]

    @property
    def channels(self) -> Tuple[int, int, int, int]:
        """Feature width per level: C, 2C, 4C, 8C."""
        return tuple(self.base_channels * 2 ** i for i in range(4))

    @property
    def spatial_divisor(self) -> int:
        return self.downsample_factor ** 3

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["block_counts"] = list(self.block_counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown NetworkConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Parameter layout
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamSlot:
    name: str
    shape: Tuple[int, ...]
    kind: str  # "weight", "bias", "gamma", "beta"
    fan_in: int = 0


def _conv_slots(prefix: str, spec: ConvSpec) -> List[ParamSlot]:
    slots = [ParamSlot(f"{prefix}.weight", spec.weight_shape, "weight", spec.fan_in)]
    if spec.has_bias:
        slots.append(ParamSlot(f"{prefix}.bias", (spec.out_channels,), "bias"))
    return slots


def _norm_slots(prefix: str, channels: int) -> List[ParamSlot]:
    return [ParamSlot(f"{prefix}.gamma", (channels,), "gamma"), ParamSlot(f"{prefix}.beta", (channels,), "beta")]


def mixer_convs(channels: int, config: NetworkConfig) -> List[Tuple[str, ConvSpec]]:
    """Feature-mixer layers of one block, in application order."""
    if config.block_variant == "lakd":
        k = config.mixer_kernel
        return [
            ("dw1", ConvSpec.depthwise(channels, k)),
            ("pw1", ConvSpec.pointwise(channels, channels)),
            ("dw2", ConvSpec.depthwise(channels, k)),
            ("pw2", ConvSpec.pointwise(channels, channels)),
        ]
    return [(f"conv{i + 1}", ConvSpec(channels, channels, 3, dilation=d)) for i, d in enumerate(DILATION_RATES)]


def fusion_convs(channels: int) -> List[Tuple[str, ConvSpec]]:
    return [
        ("w1", ConvSpec.pointwise(channels, channels)),
        ("w2", ConvSpec.pointwise(channels, channels)),
        ("dw1", ConvSpec.depthwise(channels, 3)),
        ("dw2", ConvSpec.depthwise(channels, 3)),
    ]


def block_slots(prefix: str, channels: int, config: NetworkConfig) -> List[ParamSlot]:
    slots = _norm_slots(f"{prefix}.norm1", channels)
    for name, spec in mixer_convs(channels, config):
        slots += _conv_slots(f"{prefix}.mix.{name}", spec)
    slots += _norm_slots(f"{prefix}.norm2", channels)
    for name, spec in fusion_convs(channels):
        slots += _conv_slots(f"{prefix}.fuse.{name}", spec)
    slots += _norm_slots(f"{prefix}.norm3", channels)
    return slots


def _transition_specs(config: NetworkConfig) -> Dict[str, ConvSpec]:
    ch, r2 = config.channels, config.downsample_factor ** 2
    specs = {"intro": ConvSpec(config.in_channels, ch[0], 3)}
    for lvl in (1, 2, 3):
        c, c_next = ch[lvl - 1], ch[lvl]
        specs[f"down{lvl}"] = ConvSpec.pointwise(c * r2, c_next)
        specs[f"up{lvl}"] = ConvSpec.pointwise(c_next, c * r2)
        specs[f"reduce{lvl}"] = ConvSpec.pointwise(2 * c, c)
    specs["outro"] = ConvSpec(ch[0], 3, 3)
    return specs


def param_layout(config: NetworkConfig) -> List[ParamSlot]:
    """Every learnable tensor of the network, in a fixed order."""
    ch, counts = config.channels, config.block_counts
    specs = _transition_specs(config)
    slots = _conv_slots("intro", specs["intro"])
    for lvl in (1, 2, 3, 4):
        for i in range(counts[lvl - 1]):
            slots += block_slots(f"enc{lvl}.{i}", ch[lvl - 1], config)
        if lvl < 4:
            slots += _conv_slots(f"down{lvl}", specs[f"down{lvl}"])
    for lvl in (3, 2, 1):
        slots += _conv_slots(f"up{lvl}", specs[f"up{lvl}"])
        slots += _conv_slots(f"reduce{lvl}", specs[f"reduce{lvl}"])
        for i in range(counts[lvl - 1]):
            slots += block_slots(f"dec{lvl}.{i}", ch[lvl - 1], config)
    slots += _conv_slots("outro", specs["outro"])
    return slots


def _materialize(slots: List[ParamSlot], rng_seed: int, requires_grad: bool) -> Params:
    rng = np.random.default_rng(rng_seed)
    params = {}
    for slot in slots:
        if slot.kind == "weight":
            bound = math.sqrt(1.0 / slot.fan_in)
            arr = rng.uniform(-bound, bound, size=slot.shape)
        elif slot.kind == "gamma":
            arr = np.ones(slot.shape)
        else:
            arr = np.zeros(slot.shape)
        params[slot.name] = Tensor(arr.astype(np.float32), requires_grad=requires_grad)
    return params


def init_params(config: NetworkConfig, rng_seed: int = 0, requires_grad: bool = True) -> Params:
    """Fan-in uniform conv weights, zero biases, unit/zero LayerNorm affine."""
    return _materialize(param_layout(config), rng_seed, requires_grad)


def count_params(config: NetworkConfig) -> int:
    return sum(int(np.prod(s.shape)) for s in param_layout(config))


def frozen(params: Params) -> Params:
    """Views of ``params`` that do not record gradients (data shared, not copied)."""
    return {k: Tensor(v.data) for k, v in params.items()}


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _conv(x: Tensor, params: Params, prefix: str, spec: ConvSpec) -> Tensor:
    bias = params[f"{prefix}.bias"] if spec.has_bias else None
    return conv2d(x, spec, params[f"{prefix}.weight"], bias)


def _norm(x: Tensor, params: Params, prefix: str) -> Tensor:
    return layer_norm(x, LayerNormSpec(x.shape[1], LN_EPS), params[f"{prefix}.gamma"], params[f"{prefix}.beta"])


def feature_mixer(F_prev: Tensor, params: Params, prefix: str, config: NetworkConfig) -> Tensor:
    """Return M: the block input plus the mixer chain run on its normalised copy.

    With the inner shortcut each layer's output is added back to ``z0``;
    without the middle shortcut M is the chain output alone.
    """
    z0 = _norm(F_prev, params, f"{prefix}.norm1")
    z = z0
    for name, spec in mixer_convs(F_prev.shape[1], config):
        y = _conv(z, params, f"{prefix}.mix.{name}", spec)
        z = add(z0, y) if config.shortcut_inner else y
    return add(F_prev, z) if config.shortcut_middle else z


def feature_fusion(F_prev: Tensor, M: Tensor, params: Params, prefix: str) -> Tensor:
    c = M.shape[1]
    specs = dict(fusion_convs(c))
    t = _norm(M, params, f"{prefix}.norm2")
    gate = gelu(_conv(_conv(t, params, f"{prefix}.fuse.w1", specs["w1"]), params, f"{prefix}.fuse.dw1", specs["dw1"]))
    value = _conv(_conv(t, params, f"{prefix}.fuse.w2", specs["w2"]), params, f"{prefix}.fuse.dw2", specs["dw2"])
    return add(F_prev, _norm(mul(gate, value), params, f"{prefix}.norm3"))


def _check_block_input(F_prev: Tensor, params: Params, prefix: str) -> None:
    expected = params[f"{prefix}.norm1.gamma"].shape[0]
    if F_prev.ndim != 4 or F_prev.shape[1] != expected:
        raise ValueError(f"block {prefix} expects [B, {expected}, H, W] input, got {F_prev.shape}")


def lakd_block_forward(F_prev: Tensor, params: Params, config: NetworkConfig, prefix: str = "block") -> Tensor:
    if config.block_variant != "lakd":
        raise ConfigError("lakd_block_forward needs block_variant='lakd'")
    _check_block_input(F_prev, params, prefix)
    return feature_fusion(F_prev, feature_mixer(F_prev, params, prefix, config), params, prefix)


def dilated_block_forward(F_prev: Tensor, params: Params, config: NetworkConfig, prefix: str = "block") -> Tensor:
    if config.block_variant != "dilated":
        raise ConfigError("dilated_block_forward needs block_variant='dilated'")
    _check_block_input(F_prev, params, prefix)
    return feature_fusion(F_prev, feature_mixer(F_prev, params, prefix, config), params, prefix)


def block_forward(F_prev: Tensor, params: Params, config: NetworkConfig, prefix: str) -> Tensor:
    if config.block_variant == "lakd":
        return lakd_block_forward(F_prev, params, config, prefix)
    return dilated_block_forward(F_prev, params, config, prefix)


def init_block_params(channels: int, config: NetworkConfig, rng_seed: int = 0, prefix: str = "block") -> Params:
    """Parameters for a single standalone block."""
    return _materialize(block_slots(prefix, channels, config), rng_seed, True)


def check_input(I: Tensor, config: NetworkConfig) -> None:
    if I.ndim != 4 or I.shape[1] != config.in_channels:
        raise ValueError(f"expected [B, {config.in_channels}, H, W] input for {config.input_mode!r}, got {I.shape}")
    d = config.spatial_divisor
    if I.shape[2] % d or I.shape[3] % d:
        raise ValueError(f"input height and width must be divisible by {d}, got {I.shape[2]}x{I.shape[3]}")


def iter_features(I: Tensor, params: Params, config: NetworkConfig) -> Iterator[Tuple[str, Tensor]]:
    """Run the network lazily, yielding ``(layer_name, activation)`` at each probe point."""
    check_input(I, config)
    r = config.downsample_factor
    specs = _transition_specs(config)
    counts = config.block_counts

    x = _conv(I, params, "intro", specs["intro"])
    yield "intro", x
    skips = {}
    for lvl in (1, 2, 3, 4):
        for i in range(counts[lvl - 1]):
            x = block_forward(x, params, config, f"enc{lvl}.{i}")
        yield ("bt_neck" if lvl == 4 else f"enc{lvl}"), x
        if lvl < 4:
            skips[lvl] = x
            x = _conv(pixel_unshuffle(x, r), params, f"down{lvl}", specs[f"down{lvl}"])
    for lvl in (3, 2, 1):
        x = pixel_shuffle(_conv(x, params, f"up{lvl}", specs[f"up{lvl}"]), r)
        x = _conv(concat([x, skips[lvl]], axis=1), params, f"reduce{lvl}", specs[f"reduce{lvl}"])
        for i in range(counts[lvl - 1]):
            x = block_forward(x, params, config, f"dec{lvl}.{i}")
        yield f"dec{lvl}", x
    residual = _conv(x, params, "outro", specs["outro"])
    rgb = I if config.in_channels == 3 else channel_slice(I, 0, 3)
    yield "output", add(rgb, residual)


def features_at(I: Tensor, params: Params, config: NetworkConfig, layer: str) -> Tensor:
    """Activation at ``layer``; later layers are not computed."""
    if layer not in LAYER_NAMES:
        raise ValueError(f"unknown layer {layer!r}; choose from {LAYER_NAMES}")
    for name, x in iter_features(I, params, config):
        if name == layer:
            return x
    raise AssertionError("unreachable")


def lakdnet_forward(I: Tensor, params: Params, config: NetworkConfig) -> Tensor:
    """Restored image: the RGB view of ``I`` plus the predicted correction."""
    return features_at(I, params, config, "output")
