"""Large-kernel deblurring network, a small autodiff engine, and ERF analysis tools."""
from .autodiff import Tensor, backward, grad_check, tensor
from .erf import ErfMap, ErfProfile, compute_erf, erf_support, extract_scanline, probe_lakdnet
from .erfmeter import GndParams, erfm, fit_gnd, gamma_fn, gnd_pdf, pearson_r
from .layers import ConvSpec, LayerNormSpec, conv2d, gelu, layer_norm, pixel_shuffle, pixel_unshuffle
from .model import ConfigError, NetworkConfig, count_params, features_at, init_params, lakdnet_forward
from .train import TrainConfig, train

__all__ = [
    "Tensor", "backward", "grad_check", "tensor",
    "ErfMap", "ErfProfile", "compute_erf", "erf_support", "extract_scanline", "probe_lakdnet",
    "GndParams", "erfm", "fit_gnd", "gamma_fn", "gnd_pdf", "pearson_r",
    "ConvSpec", "LayerNormSpec", "conv2d", "gelu", "layer_norm", "pixel_shuffle", "pixel_unshuffle",
    "ConfigError", "NetworkConfig", "count_params", "features_at", "init_params", "lakdnet_forward",
    "TrainConfig", "train",
]
