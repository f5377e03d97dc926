import numpy as np
import pytest
from hypothesis import given, strategies as st

from dcdc import gradcheck
from dcdc.oracles import conv2d_naive, pointwise_naive
from dcdc.static_ops import (ConvWeights, conv2d_forward, conv2d_vjp, depthwise_forward, depthwise_vjp,
                             output_size, pointwise_forward, pointwise_vjp)
from dcdc.tensor import Rng
from dcdc.verify import random_conv

NINE = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)


def test_all_ones_window_sums():
    y = conv2d_forward(NINE, ConvWeights(np.ones((1, 1, 3, 3))))
    assert y[0, 0, 1, 1] == 45.0 and y[0, 0, 0, 0] == 12.0


def test_unit_1x1_is_identity(rng):
    x = rng.normal((2, 1, 4, 5))
    assert np.array_equal(conv2d_forward(x, ConvWeights(np.ones((1, 1, 1, 1)), np.zeros(1))), x)


def test_random_instance_matches_oracle_exactly(rng):
    x, w = rng.normal((2, 3, 5, 5)), rng.normal((4, 3, 3, 3))
    assert np.array_equal(conv2d_forward(x, ConvWeights(w, padding=1)), conv2d_naive(x, w, None, 1, 1))


@given(st.integers(0, 2**32))
def test_random_shapes_match_oracle(seed):
    x, w = random_conv(Rng(seed))
    ref = conv2d_naive(x, w.weight, w.bias, w.stride, w.padding, w.groups)
    assert np.array_equal(conv2d_forward(x, w), ref)


def test_weight_validation():
    with pytest.raises(ValueError, match="even"):
        ConvWeights(np.ones((1, 1, 2, 2)))
    with pytest.raises(ValueError, match="bias"):
        ConvWeights(np.ones((2, 1, 3, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        ConvWeights(np.ones((3, 1, 3, 3)), groups=2)
    with pytest.raises(ValueError):
        conv2d_forward(np.ones((1, 2, 4, 4)), ConvWeights(np.ones((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        output_size(2, 7, 1, 1)


def test_output_size_floors():
    assert output_size(7, 3, 2, 1) == 4
    assert output_size(224, 3, 2, 1) == 112


def test_vjp_zero_dy(rng):
    x, w = rng.normal((1, 2, 4, 4)), ConvWeights(rng.normal((3, 2, 3, 3)), rng.normal(3))
    dx, dw, db = conv2d_vjp(x, w, np.zeros((1, 3, 4, 4)))
    assert not dx.any() and not dw.any() and not db.any()


def test_vjp_identity_kernel(rng):
    x, g = rng.normal((2, 1, 3, 3)), rng.normal((2, 1, 3, 3))
    dx, dw, db = conv2d_vjp(x, ConvWeights(np.ones((1, 1, 1, 1)), np.zeros(1)), g)
    assert np.array_equal(dx, g)
    assert dw[0, 0, 0, 0] == pytest.approx((x * g).sum(), rel=1e-14)
    assert db[0] == pytest.approx(g.sum(), rel=1e-14)


@pytest.mark.parametrize("op", ["conv", "depthwise", "pointwise"])
def test_finite_difference_and_adjoint(op):
    (result,) = gradcheck.run([op])
    assert result.fd_error <= 1e-6 and result.adjoint_error <= 1e-10, result


def test_depthwise_window_counts():
    y = depthwise_forward(np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 3)))
    assert y[0, 0, 1, 1] == 9.0 and y[0, 0, 0, 0] == 4.0 and y[0, 0, 0, 1] == 6.0


def test_pointwise_identity(rng):
    x = rng.normal((2, 5, 3, 3))
    assert np.array_equal(pointwise_forward(x, np.eye(5).reshape(5, 5, 1, 1)), x)


@given(st.integers(0, 2**32))
def test_depthwise_equals_grouped_conv(seed):
    r = Rng(seed)
    c, k = 1 + int(r.integers(5)), (1, 3, 5)[int(r.integers(3))]
    stride = 1 + int(r.integers(2))
    x, w = r.normal((2, c, 6, 5)), r.normal((c, 1, k, k))
    ref = conv2d_naive(x, w, None, stride, k // 2, groups=c)
    assert np.array_equal(depthwise_forward(x, w, stride), ref)
    dy = r.normal(ref.shape)
    dx, dw, _ = depthwise_vjp(x, w, dy, stride)
    dx2, dw2, _ = conv2d_vjp(x, ConvWeights(w, stride=stride, groups=c), dy)
    assert np.allclose(dx, dx2, rtol=1e-13, atol=1e-13) and np.allclose(dw, dw2, rtol=1e-13, atol=1e-13)


def test_pointwise_matches_oracle(rng):
    x, w, b = rng.normal((2, 3, 4, 4)), rng.normal((5, 3, 1, 1)), rng.normal(5)
    assert np.array_equal(pointwise_forward(x, w, b), pointwise_naive(x, w, b))
    dy = rng.normal((2, 5, 4, 4))
    dx, dw, db = pointwise_vjp(x, w, dy, b)
    np.testing.assert_allclose(dx, np.einsum("oc,bohw->bchw", w[:, :, 0, 0], dy), rtol=1e-12)
    np.testing.assert_allclose(dw[:, :, 0, 0], np.einsum("bchw,bohw->oc", x, dy), rtol=1e-12)


@given(st.integers(0, 2**32), st.integers(-2, 2), st.integers(-2, 2))
def test_translation_equivariance(seed, dh, dw):
    r = Rng(seed)
    h = w = 9
    x = r.normal((1, 2, h, w))
    weights = ConvWeights(r.normal((3, 2, 3, 3)))
    shifted = np.zeros_like(x)
    src = x[:, :, max(0, -dh):h - max(0, dh), max(0, -dw):w - max(0, dw)]
    shifted[:, :, max(0, dh):max(0, dh) + src.shape[2], max(0, dw):max(0, dw) + src.shape[3]] = src
    y, ys = conv2d_forward(x, weights), conv2d_forward(shifted, weights)
    # interior far enough from both the padding and the zero fill
    m = 1 + max(abs(dh), abs(dw))
    for i in range(m, h - m):
        for j in range(m, w - m):
            if m <= i - dh < h - m and m <= j - dw < w - m:
                assert np.array_equal(ys[..., i, j], y[..., i - dh, j - dw])


@given(st.integers(0, 2**32), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(seed, a, b):
    r = Rng(seed)
    x1, x2 = r.normal((2, 3, 5, 5)), r.normal((2, 3, 5, 5))
    w1, w2 = r.normal((4, 3, 3, 3)), r.normal((4, 3, 3, 3))
    f = lambda x, w: conv2d_forward(x, ConvWeights(w))
    lhs, rhs = f(a * x1 + b * x2, w1), a * f(x1, w1) + b * f(x2, w1)
    scale = np.abs(f(x1, w1)).max() * (abs(a) + abs(b)) + 1e-300
    assert np.abs(lhs - rhs).max() <= 1e-12 * scale
    lhs, rhs = f(x1, a * w1 + b * w2), a * f(x1, w1) + b * f(x1, w2)
    assert np.abs(lhs - rhs).max() <= 1e-12 * (np.abs(f(x1, w1)).max() + np.abs(f(x1, w2)).max()) * (abs(a) + abs(b) + 1e-300)
