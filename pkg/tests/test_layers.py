import numpy as np
import pytest

from defnet.gradcheck import check_gradients, tie_free
from defnet.layers import (
    ConvLayer,
    FcLayer,
    LossKind,
    MaxPoolLayer,
    ReluLayer,
    loss_forward_backward,
)


def test_conv_known_values():
    # Identity 1x1 kernel passes the input through plus bias.
    x = np.arange(12, dtype=np.float64).reshape(1, 3, 4)
    w = np.ones((1, 1, 1, 1))
    layer = ConvLayer(w, np.array([2.0]))
    y, _ = layer.forward(x)
    np.testing.assert_array_equal(y, x + 2.0)


def test_conv_padding_grows_output():
    x = np.ones((1, 4, 4))
    w = np.ones((1, 1, 3, 3))
    same = ConvLayer(w, np.zeros(1), padding=1)
    valid = ConvLayer(w, np.zeros(1))
    assert same.forward(x)[0].shape == (1, 4, 4)
    assert valid.forward(x)[0].shape == (1, 2, 2)
    # Interior cells see the full 3x3 ones window.
    assert same.forward(x)[0][0, 1, 1] == 9.0
    assert same.forward(x)[0][0, 0, 0] == 4.0  # corner loses 5 taps to padding


def test_conv_rejects_even_kernel():
    with pytest.raises(ValueError):
        ConvLayer(np.ones((1, 1, 2, 2)), np.zeros(1))


def test_conv_rejects_channel_mismatch():
    layer = ConvLayer(np.ones((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ValueError):
        layer.forward(np.ones((2, 5, 5)))


def test_conv_gradients():
    rng = np.random.default_rng(0)
    x = tie_free(rng, (2, 5, 5))
    layer = ConvLayer(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3),
                      padding=1)
    y0, cache = layer.forward(x)
    proj = rng.standard_normal(y0.shape)

    def f(xv):
        return float((layer.forward(xv)[0] * proj).sum())

    dx, grads = layer.backward(cache, proj)
    assert check_gradients(f, x, dx).passed

    w0 = layer.weights.copy()

    def fw(wv):
        layer.weights = wv
        try:
            return float((layer.forward(x)[0] * proj).sum())
        finally:
            layer.weights = w0

    assert check_gradients(fw, w0, grads["weights"]).passed


def test_maxpool_window_is_centered_on_stride_grid():
    # Window for output cell (i, j) sits around (sy*i, sx*j); cells
    # falling outside the input do not contribute.
    x = np.zeros((1, 4, 4))
    x[0, 0, 0] = 5.0
    pool = MaxPoolLayer((3, 3), (2, 2))
    y, _ = pool.forward(x)
    assert y.shape == (1, 2, 2)
    assert y[0, 0, 0] == 5.0
    assert y[0, 1, 1] == 0.0


def test_maxpool_backward_routes_to_winner():
    rng = np.random.default_rng(1)
    x = tie_free(rng, (2, 6, 6))
    pool = MaxPoolLayer((2, 2), (2, 2))
    y, cache = pool.forward(x)
    dy = np.ones_like(y)
    dx, _ = pool.backward(cache, dy)
    # Each window contributes exactly one unit, at the argmax cell.
    assert dx.sum() == y.size
    assert ((dx == 0) | (dx == 1)).all()


def test_maxpool_rejects_oversized_kernel():
    with pytest.raises(ValueError):
        MaxPoolLayer((5, 5), (1, 1)).forward(np.zeros((1, 3, 3)))


def test_fc_matches_matmul():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((4, 7))
    b = rng.standard_normal(4)
    x = rng.standard_normal(7)
    y, _ = FcLayer(w, b).forward(x)
    np.testing.assert_allclose(y, w @ x + b, rtol=1e-15)


def test_fc_backward_shapes_and_values():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((3, 5))
    layer = FcLayer(w, np.zeros(3))
    x = rng.standard_normal(5)
    _, cache = layer.forward(x)
    dy = rng.standard_normal(3)
    dx, grads = layer.backward(cache, dy)
    np.testing.assert_allclose(dx, w.T @ dy, rtol=1e-15)
    np.testing.assert_allclose(grads["weights"], np.outer(dy, x), rtol=1e-15)
    np.testing.assert_allclose(grads["bias"], dy, rtol=1e-15)


def test_relu_zero_gets_zero_subgradient():
    layer = ReluLayer()
    y, cache = layer.forward(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(y, [0.0, 0.0, 2.0])
    dx, _ = layer.backward(cache, np.ones(3))
    np.testing.assert_array_equal(dx, [0.0, 0.0, 1.0])


def test_softmax_loss_matches_closed_form():
    scores = np.array([1.0, 2.0, 0.5])
    loss, grad = loss_forward_backward(scores, 1, LossKind.softmax())
    p = np.exp(scores) / np.exp(scores).sum()
    assert loss == pytest.approx(-np.log(p[1]), rel=1e-12)
    want = p.copy()
    want[1] -= 1.0
    np.testing.assert_allclose(grad, want, rtol=1e-12)


def test_softmax_loss_is_shift_invariant():
    rng = np.random.default_rng(4)
    for _ in range(10):
        s = rng.standard_normal(5)
        l0, g0 = loss_forward_backward(s, 2, LossKind.softmax())
        l1, g1 = loss_forward_backward(s + 100.0, 2, LossKind.softmax())
        assert l0 == pytest.approx(l1, abs=1e-9)
        np.testing.assert_allclose(g0, g1, atol=1e-9)


def test_hinge_loss_zero_when_margins_met():
    scores = np.array([3.0, -2.0, -5.0])
    loss, grad = loss_forward_backward(scores, 0, LossKind.hinge())
    assert loss == 0.0
    np.testing.assert_array_equal(grad, np.zeros(3))


def test_hinge_loss_value():
    # label 1, margin 1: slacks are max(0, 1 + s_j) for j != 1 and
    # max(0, 1 - s_1), averaged.
    scores = np.array([0.5, 0.2, -3.0])
    loss, _ = loss_forward_backward(scores, 1, LossKind.hinge())
    assert loss == pytest.approx((1.5 + 0.8 + 0.0) / 3.0, rel=1e-12)


def test_hinge_background_label():
    # Label -1 means "none of the classes": every score should be low.
    scores = np.array([-2.0, -3.0])
    loss, _ = loss_forward_backward(scores, -1, LossKind.hinge())
    assert loss == 0.0


def test_hinge_rejects_bad_target_vector():
    with pytest.raises(ValueError):
        loss_forward_backward(np.zeros(3), np.array([1.0, 0.5, -1.0]),
                              LossKind.hinge())


def test_loss_gradients_numeric():
    rng = np.random.default_rng(5)
    for kind in (LossKind.softmax(), LossKind.hinge(), LossKind.hinge(squared=True)):
        s = tie_free(rng, (6,))
        s += np.where(np.abs(np.abs(s) - 1.0) < 1e-2, 0.05, 0.0)  # avoid hinge kink

        def f(sv):
            return loss_forward_backward(sv, 2, kind)[0]

        _, grad = loss_forward_backward(s, 2, kind)
        assert check_gradients(f, s, grad).passed, kind.name
