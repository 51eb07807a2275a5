import numpy as np
import pytest

from lakdnet.autodiff import (
    Graph, Tensor, add, apply_binary, backward, channel_slice, concat, grad_check, max_all, mean, mul, neg,
    reduce, sqrt, square, sub, sum_all, tensor,
)
from lakdnet.layers import gelu


def test_add_componentwise():
    out = add(tensor([1.0, 2.0]), tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_mul_by_ones_is_identity_with_unit_grad():
    x = tensor([0.5, -1.5, 2.0], requires_grad=True)
    out = mul(x, tensor(np.ones(3)))
    np.testing.assert_array_equal(out.data, x.data)
    backward(sum_all(out))
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_mul_grad_is_other_operand():
    a = tensor([2.0, 3.0], requires_grad=True)
    b = tensor([5.0, 7.0])
    backward(sum_all(mul(a, b)))
    np.testing.assert_array_equal(a.grad, [5.0, 7.0])


def test_sub_and_neg():
    a = tensor([1.0, 2.0], requires_grad=True)
    b = tensor([4.0, 1.0], requires_grad=True)
    backward(sum_all(sub(a, neg(b))))
    np.testing.assert_array_equal(a.grad, [1.0, 1.0])
    np.testing.assert_array_equal(b.grad, [1.0, 1.0])


def test_scalar_broadcast_supported():
    x = tensor([1.0, 2.0], requires_grad=True)
    out = mul(x, 3.0)
    np.testing.assert_array_equal(out.data, [3.0, 6.0])
    backward(sum_all(out))
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
        apply_binary("add", tensor([1.0, 2.0]), tensor([1.0, 2.0, 3.0]))


def test_unknown_binary_op_rejected():
    with pytest.raises(ValueError):
        apply_binary("div", tensor([1.0]), tensor([1.0]))


def test_reduce_mean_and_max():
    assert mean(tensor([1.0, 2.0, 3.0, 6.0])).item() == 3.0
    assert max_all(tensor([-1.0, -5.0])).item() == -1.0


def test_mean_backward_uniform():
    x = tensor([1.0, 2.0, 3.0, 4.0], requires_grad=True)
    backward(mean(x))
    np.testing.assert_array_equal(x.grad, [0.25] * 4)


def test_max_grad_goes_to_first_maximum():
    x = tensor([[1.0, 3.0], [3.0, 0.0]], requires_grad=True)
    backward(reduce("max", x))
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0], [0.0, 0.0]])


def test_reduce_empty_rejected():
    with pytest.raises(ValueError):
        reduce("mean", tensor(np.zeros(0)))


def test_mean_of_square_grad():
    x = tensor([1.0, 2.0], requires_grad=True)
    backward(mean(mul(x, x)))
    np.testing.assert_allclose(x.grad, [1.0, 2.0])


def test_two_consumers_accumulate():
    x = tensor([1.0, -2.0, 0.5], requires_grad=True)
    backward(add(sum_all(mul(x, 2.0)), sum_all(mul(x, x))))
    combined = x.grad.copy()
    expected = np.zeros(3)
    for f in (lambda t: sum_all(mul(t, 2.0)), lambda t: sum_all(mul(t, t))):
        y = tensor(x.data, requires_grad=True)
        backward(f(y))
        expected += y.grad
    np.testing.assert_allclose(combined, expected)


def test_grads_accumulate_across_calls():
    x = tensor([1.0, 2.0], requires_grad=True)
    backward(sum_all(x))
    backward(sum_all(x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    assert x.grad is None


def test_seed_scales_gradient():
    x = tensor([1.0, 2.0], requires_grad=True)
    backward(sum_all(mul(x, x)), seed=0.5)
    np.testing.assert_allclose(x.grad, [1.0, 2.0])


def test_nonscalar_root_rejected():
    x = tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        backward(mul(x, 2.0))


def test_graph_orders_nodes_by_execution():
    x = tensor([1.0, 2.0], requires_grad=True)
    y = mul(x, x)
    z = sum_all(add(y, x))
    g = Graph(z)
    orders = [n.order for n in g.nodes]
    assert orders == sorted(orders)
    assert g.nodes[-1] is z.node


def test_constants_build_no_graph():
    out = add(tensor([1.0]), tensor([2.0]))
    assert out.node is None and not out.requires_grad


def test_float32_storage():
    x = tensor(np.arange(3, dtype=np.float64))
    assert x.data.dtype == np.float32
    assert sqrt(x).data.dtype == np.float32


def test_concat_and_slice_roundtrip(rng):
    a = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 3, 3, 3)), requires_grad=True)
    c = concat([a, b], axis=1)
    assert c.shape == (1, 5, 3, 3)
    np.testing.assert_array_equal(channel_slice(c, 2, 5).data, b.data)
    backward(sum_all(mul(channel_slice(c, 0, 2), 2.0)))
    np.testing.assert_array_equal(a.grad, np.full(a.shape, 2.0, np.float32))
    assert b.grad is None or not b.grad.any()


def test_backward_is_deterministic(rng):
    data = rng.uniform(-2, 2, 50)
    grads = []
    for _ in range(2):
        x = Tensor(data, requires_grad=True)
        backward(mean(mul(gelu(x), square(x))))
        grads.append(x.grad.copy())
    assert np.array_equal(grads[0], grads[1])


def test_grad_check_mean_exact(rng):
    # the float32 scalar output bounds the difference quotient at ~ulp(f)/eps
    for _ in range(5):
        assert grad_check(mean, Tensor(rng.uniform(-2, 2, 256)), 1e-2) < 1e-6


def test_grad_check_gelu(rng):
    x = Tensor(rng.uniform(-2, 2, 20))
    assert grad_check(lambda t: mean(gelu(t)), x, 1e-3) < 1e-3


@pytest.mark.parametrize("fn", [
    lambda t: mean(mul(t, t)),
    lambda t: mean(sqrt(add(square(t), 1.0))),
    lambda t: max_all(t),
    lambda t: mean(sub(t, mul(t, 0.5))),
])
def test_grad_check_single_ops(fn, rng):
    assert grad_check(fn, Tensor(rng.uniform(-2, 2, 12)), 1e-3) < 1e-3
