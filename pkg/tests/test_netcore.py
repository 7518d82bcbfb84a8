import numpy as np
import pytest

from farkws import netcore as nc
from farkws.errors import ShapeError

from conftest import GRAD_TOL, numeric_grad, rel_error


def check_op(forward, backward, inputs, rng):
    """Finite-difference check of every input of a forward/backward pair."""
    out, cache = forward(*inputs)
    g = rng.normal(size=np.shape(out))
    analytic = backward(g, cache)
    if not isinstance(analytic, tuple):
        analytic = (analytic,)
    for arr, ana in zip(inputs, analytic):
        num = numeric_grad(lambda: np.sum(forward(*inputs)[0] * g), arr)
        assert rel_error(ana, num) < GRAD_TOL


# -- conv2d -----------------------------------------------------------------

def test_conv_delta_kernel_crops():
    x = np.arange(25.0).reshape(1, 5, 5)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out, _ = nc.conv2d_forward(x, w, np.zeros(1))
    np.testing.assert_array_equal(out[0], x[0, 1:-1, 1:-1])


def test_conv_ones():
    out, _ = nc.conv2d_forward(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == 9.0


def test_conv_gradient(rng):
    x = rng.normal(size=(2, 4, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    check_op(nc.conv2d_forward, nc.conv2d_backward, (x, w, b), rng)


def test_conv_batched_gradient(rng):
    x = rng.normal(size=(2, 3, 5, 4))
    w = rng.normal(size=(2, 3, 3, 3))
    b = rng.normal(size=2)
    check_op(nc.conv2d_forward, nc.conv2d_backward, (x, w, b), rng)


def test_conv_linearity(rng):
    w = rng.normal(size=(4, 2, 3, 3))
    zero = np.zeros(4)
    x, y = rng.normal(size=(2, 2, 9, 7))
    a, b = 1.7, -0.3
    lhs, _ = nc.conv2d_forward(a * x + b * y, w, zero)
    rhs = a * nc.conv2d_forward(x, w, zero)[0] + b * nc.conv2d_forward(y, w, zero)[0]
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-9)


@pytest.mark.parametrize("xshape,wshape", [((2, 5, 5), (1, 3, 3, 3)), ((1, 2, 5), (1, 1, 3, 3)),
                                           ((1, 5, 5), (1, 1, 2, 2))])
def test_conv_shape_errors(xshape, wshape):
    with pytest.raises(ShapeError):
        nc.conv2d_forward(np.zeros(xshape), np.zeros(wshape), np.zeros(wshape[0]))


# -- maxpool ----------------------------------------------------------------

def test_maxpool_basic():
    out, _ = nc.maxpool2_forward(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    assert out.shape == (1, 1, 1) and out[0, 0, 0] == 4.0


def test_maxpool_constant_ties_go_first():
    x = np.full((2, 4, 6), 3.0)
    out, cache = nc.maxpool2_forward(x)
    np.testing.assert_array_equal(out, np.full((2, 2, 3), 3.0))
    dx = nc.maxpool2_backward(np.ones_like(out), cache)
    expect = np.zeros_like(x)
    expect[:, 0::2, 0::2] = 1.0
    np.testing.assert_array_equal(dx, expect)


def test_maxpool_gradient(rng):
    x = rng.normal(size=(3, 7, 9))
    check_op(nc.maxpool2_forward, nc.maxpool2_backward, (x,), rng)


def test_maxpool_one_nonzero_per_window(rng):
    x = rng.normal(size=(2, 3, 7, 9))
    out, cache = nc.maxpool2_forward(x)
    assert out.shape == (2, 3, 3, 4)
    dx = nc.maxpool2_backward(rng.uniform(0.5, 1.0, size=out.shape), cache)
    win = dx[:, :, :6, :8].reshape(2, 3, 3, 2, 4, 2)
    np.testing.assert_array_equal((win != 0).sum(axis=(3, 5)), 1)
    # odd trailing row/column never receives gradient
    assert not dx[:, :, 6, :].any() and not dx[:, :, :, 8].any()


def test_maxpool_too_small():
    with pytest.raises(ShapeError):
        nc.maxpool2_forward(np.zeros((1, 1, 4)))


# -- linear / relu ----------------------------------------------------------

def test_linear_identity_and_bias():
    x = np.array([1.0, -2.0, 3.0])
    out, _ = nc.linear_forward(x, np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(out, x)
    b = np.array([0.5, 1.5])
    out, _ = nc.linear_forward(x, np.zeros((2, 3)), b)
    np.testing.assert_array_equal(out, b)


def test_linear_gradient(rng):
    check_op(nc.linear_forward, nc.linear_backward,
             (rng.normal(size=7), rng.normal(size=(5, 7)), rng.normal(size=5)), rng)


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        nc.linear_forward(np.zeros(3), np.zeros((2, 4)), np.zeros(2))


def test_relu_values():
    out, mask = nc.relu_forward(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out, [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(nc.relu_backward(np.ones(3), mask), [0.0, 0.0, 1.0])


def test_relu_dead_region():
    out, mask = nc.relu_forward(-np.arange(1.0, 6.0))
    assert not out.any()
    assert not nc.relu_backward(np.ones(5), mask).any()


def test_relu_gradient(rng):
    x = rng.normal(size=(4, 6))
    x[np.abs(x) < 1e-3] = 0.5
    check_op(nc.relu_forward, nc.relu_backward, (x,), rng)


# -- softmax cross-entropy --------------------------------------------------

def test_softmax_ce_uniform():
    loss, probs, _ = nc.softmax_ce_forward(np.zeros(4), 2)
    assert loss == pytest.approx(np.log(4.0), abs=1e-12)
    np.testing.assert_allclose(probs, 0.25)


def test_softmax_ce_saturated():
    loss, _, _ = nc.softmax_ce_forward(np.array([100.0, 0.0, 0.0]), 0)
    assert loss < 1e-9


def test_softmax_ce_gradient(rng):
    logits = rng.normal(size=7)
    label = 3
    _, _, cache = nc.softmax_ce_forward(logits, label)
    ana = nc.softmax_ce_backward(cache)
    num = numeric_grad(lambda: nc.softmax_ce_forward(logits, label)[0], logits)
    assert rel_error(ana, num) < GRAD_TOL


def test_softmax_ce_batch_gradient(rng):
    logits = rng.normal(size=(5, 4))
    labels = np.array([0, 3, 1, 1, 2])
    _, _, cache = nc.softmax_ce_forward(logits, labels)
    ana = nc.softmax_ce_backward(cache)
    num = numeric_grad(lambda: nc.softmax_ce_forward(logits, labels)[0], logits)
    assert rel_error(ana, num) < GRAD_TOL


def test_softmax_stability(rng):
    logits = rng.uniform(-1e4, 1e4, size=(50, 9))
    _, probs, _ = nc.softmax_ce_forward(logits, np.zeros(50, dtype=int))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert np.all(np.isfinite(probs))


def test_softmax_ce_label_out_of_range():
    with pytest.raises(IndexError):
        nc.softmax_ce_forward(np.zeros(3), 3)


# -- lstm -------------------------------------------------------------------

def lstm_params(rng, d, h, scale=0.5):
    return (rng.normal(scale=scale, size=(4 * h, d)), rng.normal(scale=scale, size=(4 * h, h)),
            rng.normal(scale=scale, size=4 * h))


def test_lstm_zero_weights_give_zero_states():
    x = np.random.default_rng(0).normal(size=(6, 3))
    out, _ = nc.lstm_forward(x, np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8))
    assert out.shape == (6, 2)
    assert not out.any()


def test_lstm_single_step_matches_cell(rng):
    w_ih, w_hh, b = lstm_params(rng, 3, 4)
    x = rng.normal(size=(1, 3))
    h0 = rng.normal(size=4)
    c0 = rng.normal(size=4)
    out, _ = nc.lstm_forward(x, w_ih, w_hh, b, h0, c0)
    a = w_ih @ x[0] + w_hh @ h0 + b
    sig = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
    i, f, o, g = sig(a[:4]), sig(a[4:8]), sig(a[8:12]), np.tanh(a[12:])
    c = f * c0 + i * g
    np.testing.assert_allclose(out[0], o * np.tanh(c), rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("t_len", [1, 5])
def test_lstm_bptt_gradient(rng, t_len):
    w_ih, w_hh, b = lstm_params(rng, 3, 4)
    x = rng.normal(size=(2, t_len, 3))
    h0 = rng.normal(size=(2, 4))
    c0 = rng.normal(size=(2, 4))
    out, cache = nc.lstm_forward(x, w_ih, w_hh, b, h0, c0)
    g = rng.normal(size=out.shape)
    grads = nc.lstm_backward(g, cache)

    def f():
        return np.sum(nc.lstm_forward(x, w_ih, w_hh, b, h0, c0)[0] * g)

    for arr, ana in zip((x, w_ih, w_hh, b, h0, c0), grads):
        assert rel_error(ana, numeric_grad(f, arr)) < GRAD_TOL


def test_lstm_shape_error(rng):
    w_ih, w_hh, b = lstm_params(rng, 3, 4)
    with pytest.raises(ShapeError):
        nc.lstm_forward(np.zeros((5, 2)), w_ih, w_hh, b)


# -- mean pool / concat -----------------------------------------------------

def test_mean_pool_values():
    out, _ = nc.mean_pool_time_forward(np.array([[1.0, 3.0], [3.0, 1.0]]))
    np.testing.assert_array_equal(out, [2.0, 2.0])
    row = np.array([[4.0, -1.0, 2.0]])
    np.testing.assert_array_equal(nc.mean_pool_time_forward(row)[0], row[0])


def test_mean_pool_gradient(rng):
    check_op(nc.mean_pool_time_forward, nc.mean_pool_time_backward, (rng.normal(size=(6, 5)),), rng)


def test_concat():
    out, split = nc.concat_forward(np.array([1.0, 2.0]), np.array([3.0]))
    np.testing.assert_array_equal(out, [1.0, 2.0, 3.0])
    out, split = nc.concat_forward(np.array([1.0, 2.0]), np.zeros(0))
    np.testing.assert_array_equal(out, [1.0, 2.0])
    da, db = nc.concat_backward(np.ones(5), 3)
    np.testing.assert_array_equal(da, np.ones(3))
    np.testing.assert_array_equal(db, np.ones(2))


def test_concat_rejects_matrices_of_wrong_rank():
    with pytest.raises(ShapeError):
        nc.concat_forward(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)))


def test_parameter_shapes_agree():
    p = nc.Parameter(np.ones((2, 3)))
    assert p.grad.shape == p.velocity.shape == p.value.shape
    p.grad += 1.0
    p.zero_grad()
    assert not p.grad.any()
