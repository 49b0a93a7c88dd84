"""
Unit tests for the layer forward/backward rules, checked against direct loop
implementations.
"""

import math

import numpy as np
import pytest

from lesionpipe.core.errors import ShapeError
from lesionpipe.nn import layers


def _conv_loops(x, w, b):
    n, c, h, wd = x.shape
    k = w.shape[0]
    out = np.zeros((n, k, h, wd))
    for i in range(n):
        for f in range(k):
            for y in range(h):
                for xx in range(wd):
                    total = b[f]
                    for ch in range(c):
                        for dy in range(3):
                            for dx in range(3):
                                sy, sx = y + dy - 1, xx + dx - 1
                                if 0 <= sy < h and 0 <= sx < wd:
                                    total += x[i, ch, sy, sx] * w[f, ch, dy, dx]
                    out[i, f, y, xx] = total
    return out


def test_conv_matches_loop_oracle():
    """Random 1x1x4x4 input with a 1x1x3x3 kernel."""
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 1, 4, 4))
    w = rng.standard_normal((1, 1, 3, 3))
    b = rng.standard_normal(1)
    assert np.allclose(layers.conv2d_forward(x, w, b), _conv_loops(x, w, b), atol=1e-12)


def test_conv_multi_channel_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 5, 4))
    w = rng.standard_normal((2, 3, 3, 3))
    b = rng.standard_normal(2)
    assert np.allclose(layers.conv2d_forward(x, w, b), _conv_loops(x, w, b), atol=1e-12)


def test_conv_identity_kernel_and_bias():
    """A centered unit kernel copies the input; zero weights give the bias everywhere."""
    x = np.random.default_rng(2).standard_normal((1, 1, 3, 3))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    assert np.allclose(layers.conv2d_forward(x, w, np.zeros(1)), x)
    out = layers.conv2d_forward(x, np.zeros((1, 1, 3, 3)), np.array([2.5]))
    assert np.all(out == 2.5)


def test_conv_all_ones_kernel_counts_neighbours():
    """A 3x3 all-ones kernel on a constant v sums 9v inside, 6v on edges and 4v at corners."""
    v = 2.0
    x = np.full((1, 1, 4, 4), v)
    out = layers.conv2d_forward(x, np.ones((1, 1, 3, 3)), np.zeros(1))[0, 0]
    assert np.all(out[1:3, 1:3] == 9 * v)
    assert out[0, 0] == out[0, 3] == out[3, 0] == out[3, 3] == 4 * v
    assert out[0, 1] == out[1, 0] == 6 * v


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        layers.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))


def test_conv_backward_input_gradient_is_adjoint():
    """<conv(x), g> is linear in x, so its x-gradient equals the backward result."""
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    g = rng.standard_normal((1, 3, 4, 4))
    gx, gw, gb = layers.conv2d_backward(g, x, w)
    eps = 1e-6
    for idx in [(0, 0, 0, 0), (0, 1, 2, 3), (0, 0, 3, 1)]:
        bumped = x.copy()
        bumped[idx] += eps
        diff = np.sum((layers.conv2d_forward(bumped, w, np.zeros(3)) - layers.conv2d_forward(x, w, np.zeros(3))) * g)
        assert diff / eps == pytest.approx(gx[idx], rel=1e-5, abs=1e-8)
    assert np.allclose(gb, g.sum(axis=(0, 2, 3)))
    assert gw.shape == w.shape


def _pool_loops(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for i in range(n):
        for ch in range(c):
            for y in range(h // 2):
                for xx in range(w // 2):
                    out[i, ch, y, xx] = x[i, ch, 2 * y:2 * y + 2, 2 * xx:2 * xx + 2].max()
    return out


def test_maxpool_matches_window_max():
    x = np.random.default_rng(4).standard_normal((1, 1, 4, 4))
    pooled, _ = layers.maxpool2_forward(x)
    assert np.array_equal(pooled, _pool_loops(x))


def test_maxpool_ties_route_gradient_to_first_cell():
    """An all-equal window sends its whole gradient to the top-left cell."""
    x = np.ones((1, 1, 2, 2))
    pooled, argmax = layers.maxpool2_forward(x)
    assert pooled[0, 0, 0, 0] == 1.0
    grad = layers.maxpool2_backward(np.array([[[[3.0]]]]), argmax)
    assert np.array_equal(grad[0, 0], np.array([[3.0, 0.0], [0.0, 0.0]]))


def test_maxpool_gradient_goes_to_window_maximum():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    pooled, argmax = layers.maxpool2_forward(x)
    assert pooled[0, 0, 0, 0] == 4.0
    grad = layers.maxpool2_backward(np.array([[[[2.5]]]]), argmax)
    assert np.array_equal(grad[0, 0], np.array([[0.0, 0.0], [0.0, 2.5]]))


def test_maxpool_rejects_odd_dimensions():
    with pytest.raises(ShapeError):
        layers.maxpool2_forward(np.zeros((1, 1, 3, 4)))


def test_relu_forward_and_backward():
    x = np.array([[-1.0, 0.0, 2.0]])
    assert np.array_equal(layers.relu_forward(x), np.array([[0.0, 0.0, 2.0]]))
    assert np.array_equal(layers.relu_backward(np.ones_like(x), x), np.array([[0.0, 0.0, 1.0]]))


def test_fc_forward_matches_hand_dot_product():
    x = np.array([[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]])
    w = np.array([[0.5, -1.0, 2.0]])
    b = np.array([0.25])
    out = layers.fc_forward(x, w, b)
    assert out[0, 0] == pytest.approx(0.5 - 2.0 + 6.0 + 0.25)
    assert out[1, 0] == pytest.approx(-0.5 - 0.5 + 0.25)
    assert np.array_equal(layers.fc_forward(x, np.eye(3), np.zeros(3)), x)


def test_fc_backward_shapes_and_values():
    x = np.array([[1.0, 2.0]])
    w = np.array([[3.0, 4.0]])
    gx, gw, gb = layers.fc_backward(np.array([[2.0]]), x, w)
    assert np.array_equal(gx, np.array([[6.0, 8.0]]))
    assert np.array_equal(gw, np.array([[2.0, 4.0]]))
    assert np.array_equal(gb, np.array([2.0]))


def test_bce_with_logits_values():
    """BCE(-3, 0) = log(1 + e^-3); large logits stay finite."""
    assert layers.bce_with_logits(-3.0, 0) == pytest.approx(math.log1p(math.exp(-3.0)), rel=1e-12)
    assert layers.bce_with_logits(-3.0, 0) == pytest.approx(0.048587, abs=1e-6)
    assert layers.bce_with_logits(0.0, 1) == pytest.approx(math.log(2.0))
    assert math.isfinite(layers.bce_with_logits(1000.0, 0))
    assert layers.bce_with_logits(1000.0, 0) == pytest.approx(1000.0)


def test_sigmoid_is_stable():
    z = np.array([-1000.0, 0.0, 1000.0])
    s = layers.sigmoid(z)
    assert s[1] == pytest.approx(0.5)
    assert s[0] == 0.0 and s[2] == 1.0
    assert np.all(np.isfinite(s))


def test_bce_grad_is_mean_gradient():
    logits = np.array([[0.0], [2.0]])
    labels = np.array([[1.0], [0.0]])
    expected = (1 / (1 + np.exp(-logits)) - labels) / 2
    assert np.allclose(layers.bce_grad(logits, labels), expected)
