import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from farkws.errors import ConfigError, DegenerateBatchError, ShapeError
from farkws.ingest import DomainTag
from farkws.losses import (CoralStrategy, LossConfig, LossMode, coral_loss, coral_term, covariance,
                           covariance_backward, cross_entropy, joint_coral_loss, mtl_loss)

from conftest import GRAD_TOL, numeric_grad, rel_error

D025, D1M, D3M = DomainTag.D025, DomainTag.D1M, DomainTag.D3M


def two_pass_cov(d):
    centered = d - d.mean(axis=0)
    return centered.T @ centered / (len(d) - 1)


# -- covariance -------------------------------------------------------------

def test_covariance_identical_rows():
    assert not covariance(np.tile([1.0, -2.0, 5.0], (4, 1))).any()


def test_covariance_hand_case():
    assert covariance(np.array([[0.0], [2.0]]))[0, 0] == 2.0


def test_covariance_matches_two_pass(rng):
    d = rng.normal(size=(6, 3))
    np.testing.assert_allclose(covariance(d), two_pass_cov(d), rtol=0, atol=1e-10)


def test_covariance_symmetric(rng):
    c = covariance(rng.normal(size=(20, 7)) * 10)
    assert np.abs(c - c.T).max() < 1e-12


def test_covariance_needs_two_rows():
    with pytest.raises(DegenerateBatchError):
        covariance(np.zeros((1, 3)))


def test_covariance_gradient(rng):
    d = rng.normal(size=(5, 3))
    g = rng.normal(size=(3, 3))
    num = numeric_grad(lambda: np.sum(covariance(d) * g), d)
    assert rel_error(covariance_backward(d, g), num) < GRAD_TOL


# -- coral ------------------------------------------------------------------

def test_coral_hand_case():
    loss, _, _ = coral_loss(np.array([[0.0], [2.0]]), np.array([[1.0], [1.0]]))
    assert abs(loss - 1.0) <= 1e-12


def test_coral_identical_inputs(rng):
    d = rng.normal(size=(8, 4))
    assert coral_loss(d, d.copy())[0] == 0.0


def test_coral_shape_mismatch():
    with pytest.raises(ShapeError):
        coral_loss(np.zeros((3, 2)), np.zeros((3, 3)))


def test_coral_gradient(rng):
    a = rng.normal(size=(5, 3))
    b = rng.normal(size=(7, 3)) * 2
    _, ga, gb = coral_loss(a, b)
    assert rel_error(ga, numeric_grad(lambda: coral_loss(a, b)[0], a)) < GRAD_TOL
    assert rel_error(gb, numeric_grad(lambda: coral_loss(a, b)[0], b)) < GRAD_TOL


def coral_properties(rng):
    """One random instance of the symmetry, sign and permutation properties."""
    d = int(rng.integers(1, 6))
    a = rng.normal(size=(int(rng.integers(2, 10)), d)) * rng.uniform(0.1, 3)
    b = rng.normal(size=(int(rng.integers(2, 10)), d))
    ab = coral_loss(a, b)[0]
    assert abs(ab - coral_loss(b, a)[0]) <= 1e-12
    assert ab >= 0.0
    assert abs(ab - coral_loss(a[rng.permutation(len(a))], b)[0]) <= 1e-12
    assert abs(ab - coral_loss(a, b[rng.permutation(len(b))])[0]) <= 1e-12
    # equal covariance with different rows: a shifted copy and a reflected copy
    assert coral_loss(a, a + rng.normal(size=d))[0] <= 1e-12
    assert coral_loss(a, -a)[0] <= 1e-12
    # a changed covariance is strictly penalized
    assert coral_loss(a, 2 * a)[0] > 0 or not covariance(a).any()


def test_coral_properties_random_instances():
    rng = np.random.default_rng(77)
    for _ in range(100):
        coral_properties(rng)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 2), elements=st.floats(-10, 10)),
       arrays(np.float64, (4, 2), elements=st.floats(-10, 10)))
def test_coral_zero_iff_equal_covariance(a, b):
    loss = coral_loss(a, b)[0]
    same = np.allclose(covariance(a), covariance(b), rtol=0, atol=1e-9)
    if same:
        assert loss < 1e-15
    else:
        assert loss > 0.0


# -- strategies -------------------------------------------------------------

def make_batch(rng, n=(5, 4, 6), d=3):
    return {D025: rng.normal(size=(n[0], d)), D1M: rng.normal(size=(n[1], d)) * 1.5,
            D3M: rng.normal(size=(n[2], d)) + 1.0}


def test_strategy_domains():
    assert CoralStrategy.S1.domains == {D025, D1M}
    assert CoralStrategy.S2.domains == {D025, D3M}
    assert CoralStrategy.parse("s5").domains == {D025, D1M, D3M}
    with pytest.raises(ConfigError):
        CoralStrategy.parse("s6")


@pytest.mark.parametrize("strategy", list(CoralStrategy))
def test_lambda_zero_gives_ce(rng, strategy):
    loss, grads, _ = joint_coral_loss(strategy, make_batch(rng), 0.7, 0.0)
    assert loss == 0.7
    assert all(not g.any() for g in grads.values())


@pytest.mark.parametrize("strategy", ["s1", "s2", "s4", "s5"])
def test_identical_domains_give_ce(rng, strategy):
    d = rng.normal(size=(5, 3))
    loss, _, term = joint_coral_loss(strategy, {D025: d, D1M: d.copy(), D3M: d.copy()}, 0.3, 0.8)
    assert term == 0.0 and loss == 0.3


def test_identical_domains_stacked_s3(rng):
    # stacking two copies rescales the unbiased covariance by 2(n-1)/(2n-1),
    # so the pooled target differs from the source even for identical inputs
    n, dim = 5, 3
    d = rng.normal(size=(n, dim))
    _, _, term = joint_coral_loss("s3", {D025: d, D1M: d.copy(), D3M: d.copy()}, 0.3, 0.8)
    c = two_pass_cov(d)
    shrink = 1.0 - 2 * (n - 1) / (2 * n - 1)
    assert term == pytest.approx(np.sum((shrink * c) ** 2) / (4 * dim * dim), rel=1e-12)


def test_strategy_compositions(rng):
    batch = make_batch(rng)
    s1 = coral_loss(batch[D025], batch[D1M])[0]
    s2 = coral_loss(batch[D025], batch[D3M])[0]
    s13 = coral_loss(batch[D1M], batch[D3M])[0]
    pooled = coral_loss(batch[D025], np.concatenate([batch[D1M], batch[D3M]]))[0]
    ce, lam = 1.25, 0.8
    assert joint_coral_loss("s1", batch, ce, lam)[0] == pytest.approx(ce + lam * s1, abs=1e-14)
    assert joint_coral_loss("s2", batch, ce, lam)[0] == pytest.approx(ce + lam * s2, abs=1e-14)
    assert joint_coral_loss("s3", batch, ce, lam)[0] == pytest.approx(ce + lam * pooled, abs=1e-14)
    assert joint_coral_loss("s4", batch, ce, lam)[0] == pytest.approx(ce + lam * (s1 + s2) / 2, abs=1e-14)
    assert joint_coral_loss("s5", batch, ce, lam)[0] == pytest.approx(
        ce + lam * (s1 + s2 + s13) / 3, abs=1e-14)


def test_s4_gradient_is_weighted_sum(rng):
    batch = make_batch(rng)
    lam = 0.8
    _, grads, _ = joint_coral_loss("s4", batch, 0.0, lam)
    _, a1, b1 = coral_loss(batch[D025], batch[D1M])
    _, a2, b2 = coral_loss(batch[D025], batch[D3M])
    np.testing.assert_allclose(grads[D025], lam * (a1 + a2) / 2, rtol=0, atol=1e-15)
    np.testing.assert_allclose(grads[D1M], lam * b1 / 2, rtol=0, atol=1e-15)
    np.testing.assert_allclose(grads[D3M], lam * b2 / 2, rtol=0, atol=1e-15)


@pytest.mark.parametrize("strategy", list(CoralStrategy))
def test_strategy_gradients(rng, strategy):
    batch = make_batch(rng)
    _, grads, _ = joint_coral_loss(strategy, batch, 0.0, 0.8)
    for tag, g in grads.items():
        num = numeric_grad(lambda: joint_coral_loss(strategy, batch, 0.0, 0.8)[0], batch[tag])
        assert rel_error(g, num) < GRAD_TOL


def test_missing_domain_named(rng):
    batch = make_batch(rng)
    batch[D1M] = batch[D1M][:1]
    with pytest.raises(DegenerateBatchError, match="1m"):
        coral_term("s1", batch)
    del batch[D3M]
    with pytest.raises(DegenerateBatchError, match="3m"):
        coral_term("s2", batch)


# -- mtl / ce / config ------------------------------------------------------

def test_mtl_uniform_logits():
    loss, _, _ = mtl_loss(np.zeros((5, 4)), np.arange(5) % 4, np.zeros((5, 3)), np.arange(5) % 3, 0.2)
    assert loss == pytest.approx(np.log(4) + 0.2 * np.log(3), abs=1e-12)


def test_mtl_lambda_zero(rng):
    wl, dl = rng.normal(size=(4, 4)), rng.normal(size=(4, 3))
    labels = np.array([0, 1, 2, 3])
    loss, _, dd = mtl_loss(wl, labels, dl, labels % 3, 0.0)
    assert loss == cross_entropy(wl, labels)[0]
    assert not dd.any()


def test_mtl_gradients(rng):
    wl, dl = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
    wy, dy = rng.integers(0, 4, 6), rng.integers(0, 3, 6)
    _, gw, gd = mtl_loss(wl, wy, dl, dy, 0.2)
    assert rel_error(gw, numeric_grad(lambda: mtl_loss(wl, wy, dl, dy, 0.2)[0], wl)) < GRAD_TOL
    assert rel_error(gd, numeric_grad(lambda: mtl_loss(wl, wy, dl, dy, 0.2)[0], dl)) < GRAD_TOL


def test_mtl_label_out_of_range():
    with pytest.raises(IndexError):
        mtl_loss(np.zeros((2, 4)), [0, 1], np.zeros((2, 3)), [0, 3], 0.2)


def test_loss_config_defaults():
    assert LossConfig("coral", "s2").lam == 0.8
    assert LossConfig("mtl").lam == 0.2
    assert LossConfig().mode is LossMode.CE
    with pytest.raises(ConfigError):
        LossConfig("coral")
    with pytest.raises(ConfigError):
        LossConfig("mtl", "s1")
    with pytest.raises(ConfigError):
        LossConfig("coral", "s1", -0.1)
