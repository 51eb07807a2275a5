"""Differentiable building blocks: grouped convolution, channel LayerNorm, GELU, pixel (un)shuffle."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import erf

from . import _kernels
from .autodiff import Tensor, make_result

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ConvSpec:
    """Shape of a same-padded square convolution.

    ``groups == in_channels == out_channels`` is a depth-wise convolution and
    ``kernel_size == 1, groups == 1`` a point-wise one.
    """

    in_channels: int
    out_channels: int
    kernel_size: int = 3
    groups: int = 1
    dilation: int = 1
    has_bias: bool = True

    def __post_init__(self):
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"channels ({self.in_channels}, {self.out_channels}) not divisible by groups={self.groups}"
            )
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")

    @property
    def padding(self) -> int:
        return self.dilation * (self.kernel_size - 1) // 2

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels // self.groups, self.kernel_size, self.kernel_size)

    @property
    def fan_in(self) -> int:
        return (self.in_channels // self.groups) * self.kernel_size ** 2

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    @property
    def is_pointwise(self) -> bool:
        return self.kernel_size == 1 and self.groups == 1

    @property
    def n_params(self) -> int:
        return int(np.prod(self.weight_shape)) + (self.out_channels if self.has_bias else 0)

    @classmethod
    def depthwise(cls, channels: int, kernel_size: int, dilation: int = 1) -> "ConvSpec":
        return cls(channels, channels, kernel_size, groups=channels, dilation=dilation)

    @classmethod
    def pointwise(cls, in_channels: int, out_channels: int) -> "ConvSpec":
        return cls(in_channels, out_channels, 1)


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Same-padded (zero border) cross-correlation of an NCHW tensor."""
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ValueError(f"conv2d expects [B, {spec.in_channels}, H, W] input, got {x.shape}")
    if weight.shape != spec.weight_shape:
        raise ValueError(f"conv2d weight shape {weight.shape} != expected {spec.weight_shape}")
    if spec.has_bias and (bias is None or bias.shape != (spec.out_channels,)):
        raise ValueError(f"conv2d expects a bias of shape ({spec.out_channels},)")
    inputs = (x, weight, bias) if spec.has_bias else (x, weight)
    if spec.is_pointwise:
        return _pointwise(x, spec, weight, bias, inputs)

    B, Cin, H, W = x.shape
    Cout, p, d = spec.out_channels, spec.padding, spec.dilation
    Hp, Wp = H + 2 * p, W + 2 * p
    total = B * Hp * Wp
    L = total - 2 * p * (Wp + 1)
    xw = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))).transpose(1, 0, 2, 3).reshape(Cin, total)
    b = bias.data if spec.has_bias else np.zeros(Cout, np.float32)
    out = np.zeros((Cout, total), np.float64)
    out[:, :L] = _kernels.conv_forward(xw, weight.data, b, Wp, L, d)
    out = out.reshape(Cout, B, Hp, Wp)[:, :, :H, :W].transpose(1, 0, 2, 3)

    def bw(g):
        gw = np.zeros((Cout, B, Hp, Wp), np.float64)
        gw[:, :, :H, :W] = g.transpose(1, 0, 2, 3)
        gw = np.ascontiguousarray(gw.reshape(Cout, total)[:, :L])
        gx = gwt = gb = None
        if x.requires_grad:
            gxw = _kernels.conv_input_grad(gw, weight.data, Cin, total, Wp, d)
            gx = gxw.reshape(Cin, B, Hp, Wp)[:, :, p:p + H, p:p + W].transpose(1, 0, 2, 3).astype(np.float32)
        if weight.requires_grad:
            gwt = _kernels.conv_weight_grad(gw, xw, Cin // spec.groups, spec.kernel_size, Wp, d).astype(np.float32)
        if spec.has_bias and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
        return (gx, gwt, gb)[: len(inputs)]

    return make_result(np.ascontiguousarray(out, dtype=np.float32), "conv2d", inputs, bw)


def _pointwise(x, spec, weight, bias, inputs):
    B, C, H, W = x.shape
    xf = x.data.reshape(B, C, H * W).astype(np.float64)
    w2 = weight.data.reshape(spec.out_channels, C).astype(np.float64)
    out = np.matmul(w2, xf)
    if spec.has_bias:
        out += bias.data.astype(np.float64)[None, :, None]

    def bw(g):
        g64 = g.reshape(B, spec.out_channels, H * W).astype(np.float64)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(w2.T, g64).reshape(x.shape).astype(np.float32)
        if weight.requires_grad:
            gw = np.matmul(g64, xf.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape).astype(np.float32)
        if spec.has_bias and bias.requires_grad:
            gb = g64.sum(axis=(0, 2)).astype(np.float32)
        return (gx, gw, gb)[: len(inputs)]

    return make_result(out.reshape(B, spec.out_channels, H, W).astype(np.float32), "conv2d_1x1", inputs, bw)


@dataclass(frozen=True)
class LayerNormSpec:
    normalized_channels: int
    epsilon: float = 1e-6
    affine: bool = True


def layer_norm(x: Tensor, spec: LayerNormSpec, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None) -> Tensor:
    """Normalise over channels independently at every (batch, y, x) location."""
    if x.ndim != 4 or x.shape[1] != spec.normalized_channels:
        raise ValueError(f"layer_norm expects {spec.normalized_channels} channels, got shape {x.shape}")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + spec.epsilon)
    xhat = xc * rstd
    if spec.affine:
        if gamma is None or beta is None:
            raise ValueError("affine layer_norm needs gamma and beta")
        g64 = gamma.data.astype(np.float64)[None, :, None, None]
        out = xhat * g64 + beta.data.astype(np.float64)[None, :, None, None]
        inputs = (x, gamma, beta)
    else:
        g64 = 1.0
        out = xhat
        inputs = (x,)

    def bw(g):
        g = g.astype(np.float64)
        gxhat = g * g64
        gx = None
        if x.requires_grad:
            gx = rstd * (
                gxhat - gxhat.mean(axis=1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=1, keepdims=True)
            )
            gx = gx.astype(np.float32)
        if not spec.affine:
            return (gx,)
        ggamma = (g * xhat).sum(axis=(0, 2, 3)).astype(np.float32) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)).astype(np.float32) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return make_result(out.astype(np.float32), "layer_norm", inputs, bw)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    xd = x.data.astype(np.float64)
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * cdf

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf)).astype(np.float32),

    return make_result(out.astype(np.float32), "gelu", (x,), bw)


def _unshuffle_array(a: np.ndarray, r: int) -> np.ndarray:
    B, C, H, W = a.shape
    a = a.reshape(B, C, H // r, r, W // r, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(a).reshape(B, C * r * r, H // r, W // r)


def _shuffle_array(a: np.ndarray, r: int) -> np.ndarray:
    B, C, H, W = a.shape
    c = C // (r * r)
    a = a.reshape(B, c, r, r, H, W).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(a).reshape(B, c, H * r, W * r)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Space-to-depth: output channel ``c*r*r + dy*r + dx`` at (h, w) is input c at (h*r+dy, w*r+dx)."""
    if x.ndim != 4 or x.shape[2] % r or x.shape[3] % r:
        raise ValueError(f"pixel_unshuffle: spatial size {x.shape[2:]} not divisible by {r}")
    return make_result(_unshuffle_array(x.data, r), "pixel_unshuffle", (x,), lambda g: (_shuffle_array(g, r),))


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space; the exact inverse of :func:`pixel_unshuffle`."""
    if x.ndim != 4 or x.shape[1] % (r * r):
        raise ValueError(f"pixel_shuffle: {x.shape[1]} channels not divisible by {r * r}")
    return make_result(_shuffle_array(x.data, r), "pixel_shuffle", (x,), lambda g: (_unshuffle_array(g, r),))
