import math

import numpy as np
import pytest

from lakdnet.autodiff import Tensor, backward, grad_check, mean, mul, sum_all
from lakdnet.layers import ConvSpec, LayerNormSpec, conv2d, gelu, layer_norm, pixel_shuffle, pixel_unshuffle

from oracles import naive_conv2d, naive_unshuffle


def _conv_inputs(rng, spec, shape):
    x = Tensor(rng.standard_normal(shape), requires_grad=True)
    w = Tensor(rng.uniform(-0.5, 0.5, spec.weight_shape), requires_grad=True)
    b = Tensor(rng.uniform(-0.5, 0.5, spec.out_channels), requires_grad=True)
    return x, w, b


def test_convspec_validation():
    with pytest.raises(ValueError):
        ConvSpec(4, 6, 3, groups=4)
    with pytest.raises(ValueError):
        ConvSpec(4, 4, 4)
    spec = ConvSpec.depthwise(8, 9)
    assert spec.is_depthwise and spec.fan_in == 81 and spec.padding == 4
    assert ConvSpec.pointwise(3, 5).is_pointwise
    assert ConvSpec(4, 4, 5, dilation=3).padding == 6


def test_all_ones_counts_overlap():
    spec = ConvSpec(1, 1, 3, has_bias=False)
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), spec, Tensor(np.ones((1, 1, 3, 3))))
    np.testing.assert_array_equal(out.data[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_delta_kernel_is_identity(rng):
    spec = ConvSpec(2, 2, 5, groups=2, has_bias=False)
    w = np.zeros(spec.weight_shape)
    w[:, 0, 2, 2] = 1
    x = rng.standard_normal((2, 2, 7, 6))
    out = conv2d(Tensor(x), spec, Tensor(w))
    np.testing.assert_array_equal(out.data, x.astype(np.float32))


def test_depthwise_scales_channels(rng):
    spec = ConvSpec.depthwise(2, 3)
    w = np.zeros(spec.weight_shape)
    w[0, 0, 1, 1], w[1, 0, 1, 1] = 1.0, 2.0
    x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    out = conv2d(Tensor(x), spec, Tensor(w), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data[0, 0], x[0, 0])
    np.testing.assert_allclose(out.data[0, 1], 2 * x[0, 1])


@pytest.mark.parametrize("k", [1, 3, 5])
@pytest.mark.parametrize("groups", [1, 4])
@pytest.mark.parametrize("dilation", [1, 2])
def test_conv_matches_oracle(k, groups, dilation, rng):
    spec = ConvSpec(4, 4, k, groups=groups, dilation=dilation)
    x, w, b = _conv_inputs(rng, spec, (2, 4, 9, 11))
    out = conv2d(x, spec, w, b)
    ref = naive_conv2d(x.data, w.data, b.data, groups, dilation)
    assert np.max(np.abs(out.data - ref)) < 1e-4


def test_conv_grouped_unequal_channels(rng):
    spec = ConvSpec(4, 6, 3, groups=2)
    x, w, b = _conv_inputs(rng, spec, (1, 4, 6, 6))
    ref = naive_conv2d(x.data, w.data, b.data, 2, 1)
    assert np.max(np.abs(conv2d(x, spec, w, b).data - ref)) < 1e-4


def _oracle_grads(x, w, b, groups, dilation, g):
    """Gradients of <g, conv(x, w)> by probing the bilinear map with unit vectors."""
    gx = np.zeros_like(x, dtype=np.float64)
    gw = np.zeros_like(w, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x, dtype=np.float64)
        e[idx] = 1.0
        gx[idx] = np.sum(g * naive_conv2d(e, w, None, groups, dilation))
    for idx in np.ndindex(w.shape):
        e = np.zeros_like(w, dtype=np.float64)
        e[idx] = 1.0
        gw[idx] = np.sum(g * naive_conv2d(x, e, None, groups, dilation))
    return gx, gw, g.sum(axis=(0, 2, 3))


@pytest.mark.parametrize("k,groups,dilation", [(3, 1, 1), (3, 3, 2), (1, 1, 1), (5, 3, 1)])
def test_conv_backward_matches_oracle(k, groups, dilation, rng):
    spec = ConvSpec(3, 3, k, groups=groups, dilation=dilation)
    x, w, b = _conv_inputs(rng, spec, (2, 3, 5, 6))
    g = rng.standard_normal((2, 3, 5, 6))
    backward(sum_all(mul(conv2d(x, spec, w, b), Tensor(g))))
    gx, gw, gb = _oracle_grads(x.data, w.data, b.data, groups, dilation, g.astype(np.float32).astype(np.float64))
    np.testing.assert_allclose(x.grad, gx, atol=1e-4)
    np.testing.assert_allclose(w.grad, gw, atol=1e-4)
    np.testing.assert_allclose(b.grad, gb, atol=1e-4)


def test_conv_rejects_bad_shapes(rng):
    spec = ConvSpec(3, 3, 3)
    with pytest.raises(ValueError):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), spec, Tensor(np.zeros(spec.weight_shape)), Tensor(np.zeros(3)))
    with pytest.raises(ValueError):
        conv2d(Tensor(np.zeros((1, 3, 4, 4))), spec, Tensor(np.zeros((3, 3, 5, 5))), Tensor(np.zeros(3)))


@pytest.mark.parametrize("spec", [ConvSpec(2, 3, 3), ConvSpec.depthwise(3, 5, dilation=2), ConvSpec.pointwise(3, 2)])
def test_conv_grad_check(spec, rng):
    w = Tensor(rng.uniform(-0.5, 0.5, spec.weight_shape))
    b = Tensor(rng.uniform(-0.5, 0.5, spec.out_channels))
    x = Tensor(rng.uniform(-2, 2, (1, spec.in_channels, 5, 5)))
    assert grad_check(lambda t: mean(mul(conv2d(t, spec, w, b), conv2d(t, spec, w, b))), x, 1e-3) < 1e-3
    assert grad_check(lambda t: mean(mul(conv2d(x, spec, t, b), conv2d(x, spec, t, b))), w, 1e-3) < 1e-3


def test_layer_norm_constant_channels_gives_zero():
    x = Tensor(np.full((1, 4, 3, 3), 2.5))
    out = layer_norm(x, LayerNormSpec(4), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.all(out.data == 0)


def test_layer_norm_two_channel_pixel():
    x = Tensor(np.array([1.0, 3.0]).reshape(1, 2, 1, 1))
    out = layer_norm(x, LayerNormSpec(2, epsilon=1e-12), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data.ravel(), [-1.0, 1.0], atol=1e-6)


def test_layer_norm_zero_gamma_gives_beta(rng):
    beta = np.array([0.5, -1.0, 2.0])
    out = layer_norm(Tensor(rng.standard_normal((2, 3, 4, 4))), LayerNormSpec(3), Tensor(np.zeros(3)), Tensor(beta))
    np.testing.assert_array_equal(out.data, np.broadcast_to(beta[None, :, None, None], (2, 3, 4, 4)).astype(np.float32))


def test_layer_norm_statistics(rng):
    x = Tensor(rng.standard_normal((2, 16, 5, 5)) * 3 + 1)
    out = layer_norm(x, LayerNormSpec(16), Tensor(np.ones(16)), Tensor(np.zeros(16))).data.astype(np.float64)
    assert np.abs(out.mean(axis=1)).max() < 1e-5
    assert np.abs(out.var(axis=1) - 1).max() < 1e-3


def test_layer_norm_without_affine(rng):
    x = Tensor(rng.standard_normal((1, 4, 2, 2)))
    a = layer_norm(x, LayerNormSpec(4, affine=False))
    b = layer_norm(x, LayerNormSpec(4), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(a.data, b.data)


def test_layer_norm_channel_mismatch():
    with pytest.raises(ValueError):
        layer_norm(Tensor(np.zeros((1, 3, 2, 2))), LayerNormSpec(4), Tensor(np.ones(4)), Tensor(np.zeros(4)))


def test_layer_norm_grad_check(rng):
    gamma = Tensor(rng.uniform(0.5, 1.5, 4))
    beta = Tensor(rng.uniform(-0.5, 0.5, 4))
    spec = LayerNormSpec(4)
    w = Tensor(rng.standard_normal((1, 4, 3, 3)))
    x = Tensor(rng.uniform(-2, 2, (1, 4, 3, 3)))
    assert grad_check(lambda t: mean(mul(layer_norm(t, spec, gamma, beta), w)), x, 1e-3) < 1e-3
    assert grad_check(lambda t: mean(mul(layer_norm(x, spec, t, beta), w)), gamma, 1e-3) < 1e-3
    assert grad_check(lambda t: mean(mul(layer_norm(x, spec, gamma, t), w)), beta, 1e-3) < 1e-3


def test_gelu_values():
    out = gelu(Tensor(np.array([0.0, 1.0, -10.0]))).data
    assert out[0] == 0.0
    phi1 = 0.5 * (1 + math.erf(1 / math.sqrt(2)))
    assert abs(out[1] - phi1) < 1e-6
    assert abs(out[1] - 0.841345) < 1e-6
    assert abs(out[2]) < 1e-20


def test_unshuffle_ordering():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    np.testing.assert_array_equal(pixel_unshuffle(x, 2).data.ravel(), [1, 2, 3, 4])


def test_unshuffle_matches_oracle(rng):
    x = rng.standard_normal((2, 3, 6, 4)).astype(np.float32)
    np.testing.assert_array_equal(pixel_unshuffle(Tensor(x), 2).data, naive_unshuffle(x, 2))


def test_shuffle_unshuffle_roundtrip(rng):
    x = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
    back = pixel_shuffle(pixel_unshuffle(Tensor(x), 2), 2).data
    assert np.array_equal(back, x)
    y = rng.standard_normal((1, 8, 2, 2)).astype(np.float32)
    assert np.array_equal(pixel_unshuffle(pixel_shuffle(Tensor(y), 2), 2).data, y)
    assert sorted(pixel_unshuffle(Tensor(x), 2).data.ravel()) == sorted(x.ravel())


def test_unshuffle_grad_is_permutation(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    g = rng.standard_normal((1, 8, 2, 2)).astype(np.float32)
    backward(sum_all(mul(pixel_unshuffle(x, 2), Tensor(g))))
    # the adjoint of a permutation is its inverse
    assert np.array_equal(naive_unshuffle(x.grad, 2), g)


def test_unshuffle_rejects_indivisible():
    with pytest.raises(ValueError):
        pixel_unshuffle(Tensor(np.zeros((1, 1, 3, 4))), 2)
    with pytest.raises(ValueError):
        pixel_shuffle(Tensor(np.zeros((1, 3, 2, 2))), 2)
