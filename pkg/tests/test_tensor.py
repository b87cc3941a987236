import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from atm.tensor import (ConvParams, Tensor, amin, avg_pool2, concat, conv2d, cross_entropy,
                        elementwise, finite_diff_check, gelu, getitem, log, no_grad, relu,
                        softmax, sorted_mean, stack, take, upsample2)

from oracles import conv2d_loops


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def test_elementwise_examples():
    assert np.array_equal(elementwise("add", [1, 2], [3, 4]).data, [4, 6])
    x = Tensor([0.5, -2.0, 3.0])
    assert np.array_equal(elementwise("sub", x, x).data, np.zeros(3))
    assert np.allclose(elementwise("log", [1.0, math.e]).data, [0.0, 1.0])
    assert elementwise("log", [1.0, math.e]).data[0] == 0.0


def test_elementwise_errors():
    with pytest.raises(ValueError, match="shape"):
        elementwise("add", [1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        elementwise("log", [1.0, 0.0])
    with pytest.raises(ValueError):
        elementwise("log", [-1.0])
    with pytest.raises(ValueError):
        elementwise("pow", [1.0], [1.0])


def test_elementwise_grads_reach_both_operands(rng):
    a = Tensor(rng.normal(size=4), requires_grad=True)
    b = Tensor(rng.normal(size=4), requires_grad=True)
    elementwise("mul", a, b).sum().backward()
    assert np.array_equal(a.grad, b.data)
    assert np.array_equal(b.grad, a.data)


def test_backward_examples(rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))
    y = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    (y * y).sum().backward()
    assert np.allclose(y.grad, 2 * y.data)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2).backward()


def test_backward_populates_every_tracked_tensor(rng):
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3,)), requires_grad=True)
    h = relu(a * b + 1.0)
    loss = (h * h).sum()
    loss.backward()
    for t in (a, b, h, loss):
        assert t.grad is not None and t.grad.shape == t.shape


def test_shared_subgraph_accumulates(rng):
    x = Tensor(rng.normal(size=5), requires_grad=True)
    y = x * 3.0
    (y + y).sum().backward()
    assert np.allclose(x.grad, 6.0)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2
    assert not y.requires_grad


def test_finite_diff_on_sum_is_exact(rng):
    assert finite_diff_check(lambda t: t.sum(), rng.normal(size=(3, 4)), 1e-4) < 1e-10


def test_finite_diff_on_conv_log_sub_chain(rng):
    w = rng.normal(size=(2, 2, 3, 3)) * 0.2
    b = np.array([3.0, 3.5])
    ref = rng.random((1, 2, 5, 5))

    def f(t):
        y = conv2d(t, w, b, 1, 1)
        return (log(y * y + 1.0) - Tensor(ref)).sum()

    assert finite_diff_check(f, rng.normal(size=(1, 2, 5, 5)), 1e-4) < 1e-4


def test_conv2d_identity_kernel(rng):
    x = rng.normal(size=(2, 3, 5, 4))
    w = np.eye(3).reshape(3, 3, 1, 1)
    assert np.array_equal(conv2d(x, w, np.zeros(3)).data, x)


def test_conv2d_all_ones_on_constant():
    c = 0.7
    x = np.full((1, 1, 6, 6), c)
    out = conv2d(x, np.ones((1, 1, 3, 3)), np.zeros(1), 1, 1).data
    assert np.allclose(out[0, 0, 1:-1, 1:-1], 9 * c)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_loop_oracle_bitwise(rng, stride, padding):
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    assert np.array_equal(conv2d(x, w, b, stride, padding).data,
                          conv2d_loops(x, w, b, stride, padding))


def test_conv2d_channel_mismatch(rng):
    with pytest.raises(ValueError, match="channel"):
        conv2d(rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 3, 3, 3)))


def test_conv_params_validation():
    with pytest.raises(ValueError):
        ConvParams(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros(1)))
    p = ConvParams(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), stride=1, padding=1)
    assert conv2d(np.ones((1, 1, 4, 4)), p).shape == (1, 1, 4, 4)


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
def test_conv2d_gradients(rng, stride, padding):
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    R = None

    def f_x(t):
        nonlocal R
        out = conv2d(t, w, b, stride, padding)
        if R is None:
            R = rng.normal(size=out.shape)
        return (out * R).sum()

    x = rng.normal(size=(2, 2, 5, 5))
    assert finite_diff_check(f_x, x) < 1e-4
    assert finite_diff_check(lambda t: (conv2d(x, t, b, stride, padding) * R).sum(), w) < 1e-4
    assert finite_diff_check(lambda t: (conv2d(x, w, t, stride, padding) * R).sum(), b) < 1e-4


def test_avg_pool2_examples():
    x = np.array([[[[1.0, 3.0], [5.0, 7.0]]]])
    assert np.array_equal(avg_pool2(x).data, [[[[4.0]]]])
    with pytest.raises(ValueError, match="even"):
        avg_pool2(np.zeros((1, 1, 3, 4)))


@given(c=st.floats(-1e6, 1e6, allow_nan=False), h=st.integers(1, 5), w=st.integers(1, 5))
def test_constants_are_fixed_points(c, h, w):
    x = np.full((2, 3, 2 * h, 2 * w), c)
    assert np.array_equal(avg_pool2(x).data, np.full((2, 3, h, w), c))
    assert np.array_equal(upsample2(x).data, np.full((2, 3, 4 * h, 4 * w), c))
    assert np.array_equal(upsample2(avg_pool2(x)).data, x)


@settings(max_examples=50)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4)).map(
    lambda s: (s[0], 2 * s[1], 2 * s[2])), elements=st.floats(-100, 100)))
def test_pool_then_upsample_preserves_channel_mean(x):
    y = upsample2(avg_pool2(x)).data
    assert y.shape == x.shape
    assert np.allclose(y.mean(axis=(-2, -1)), x.mean(axis=(-2, -1)), rtol=0, atol=1e-12)


def test_upsample2_values():
    x = np.array([[0.0, 4.0]])
    assert np.array_equal(upsample2(x).data[0], [0.0, 1.0, 3.0, 4.0])


def test_pool_upsample_gradients(rng):
    R1 = rng.normal(size=(2, 3, 2, 3))
    R2 = rng.normal(size=(2, 3, 6, 8))
    assert finite_diff_check(lambda t: (avg_pool2(t) * R1).sum(), rng.normal(size=(2, 3, 4, 6))) < 1e-4
    assert finite_diff_check(lambda t: (upsample2(t) * R2).sum(), rng.normal(size=(2, 3, 3, 4))) < 1e-4


def test_shape_op_gradients(rng):
    x = rng.normal(size=(3, 4, 5))
    R = rng.normal(size=(2, 4, 4, 5))
    idx = np.array([[0, 2], [1, 1], [2, 0], [2, 2]])
    assert finite_diff_check(lambda t: (take(t, idx, 0).transpose((1, 0, 2, 3)) * R).sum(), x) < 1e-4
    R1 = rng.normal(size=(3, 4, 2, 5))
    assert finite_diff_check(lambda t: (take(t, idx, 1) * R1).sum(), x) < 1e-4
    R2 = rng.normal(size=(3, 4, 3))
    assert finite_diff_check(lambda t: (getitem(t, (slice(None), slice(None), slice(1, 4))) * R2).sum(), x) < 1e-4
    R3 = rng.normal(size=(6, 4, 5))
    assert finite_diff_check(lambda t: (concat([t, t * 2.0], axis=0) * R3).sum(), x) < 1e-4
    R4 = rng.normal(size=(3, 2, 4, 5))
    assert finite_diff_check(lambda t: (stack([t, t * t], axis=1) * R4).sum(), x) < 1e-4


def test_nonlinearity_gradients(rng):
    x = rng.normal(size=(4, 6))
    R = rng.normal(size=(4, 6))
    assert finite_diff_check(lambda t: (softmax(t, -1) * R).sum(), x) < 1e-4
    assert finite_diff_check(lambda t: (gelu(t) * R).sum(), x) < 1e-4
    assert finite_diff_check(lambda t: cross_entropy(t, [0, 5, 2, 1]), x) < 1e-4
    assert finite_diff_check(lambda t: (amin(t, axis=(0, 1), keepdims=True) * 3.0).sum(), x) < 1e-4
    assert finite_diff_check(lambda t: (sorted_mean(t, axis=0) * R[0]).sum(), x) < 1e-4


def test_sorted_mean_is_order_independent(rng):
    x = rng.normal(size=(3, 8, 5))
    perm = rng.permutation(8)
    a = sorted_mean(x, axis=1).data
    assert np.array_equal(a, sorted_mean(x[:, perm], axis=1).data)
    assert np.allclose(a, x.mean(axis=1))


def test_cross_entropy_value():
    logits = np.array([[0.0, 0.0], [2.0, 0.0]])
    expected = (math.log(2) + math.log(1 + math.exp(-2))) / 2
    assert cross_entropy(logits, [1, 0]).item() == pytest.approx(expected, rel=1e-14)


def test_finite_diff_skips_kink_crossings():
    x = np.array([5e-5, 1.0])  # first coordinate sits inside one step of the relu kink
    f = lambda t: relu(t).sum()
    assert finite_diff_check(f, x) > 0.1
    assert finite_diff_check(f, x, smooth_only=True) < 1e-8
