import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedunlearn.errors import DegenerateBatchError, LabelError, NumericError
from fedunlearn.losses import (compute_prototypes, gaussian_kl, loss_causal, loss_classification,
                               loss_noncausal, loss_reconstruction, per_sample_ce)
from fedunlearn.numerics import ParamVector, finite_diff_check


def fd(loss_of_array, grad, x):
    """Relative finite-difference error of ``grad`` for a loss of one array."""
    shape = x.shape
    fn = lambda p: loss_of_array(p.values.reshape(shape))  # noqa: E731
    return finite_diff_check(fn, grad, ParamVector(x.ravel()))


# --- prototypes -----------------------------------------------------------------

def test_prototypes_mean_and_absent():
    p = compute_prototypes(np.array([[1.0, 0.0], [0.0, 1.0], [4.0, 4.0]]), [0, 0, 1], 3)
    np.testing.assert_array_equal(p.vectors[0], [0.5, 0.5])
    np.testing.assert_array_equal(p.vectors[1], [4.0, 4.0])  # singleton equals its sample
    np.testing.assert_array_equal(p.present, [True, True, False])


# --- causal loss ----------------------------------------------------------------

def test_causal_two_logit_value():
    # s(z, p_y) = 1 and s(z, p_other) = -1 with fixed prototypes
    protos = compute_prototypes(np.array([[1.0, 0.0], [-1.0, 0.0]]), [0, 1], 2)
    loss, _ = loss_causal(np.array([[2.0, 0.0]]), [0], 2, prototypes=protos)
    assert loss == pytest.approx(np.log1p(np.exp(-2.0)), abs=1e-12)
    assert loss == pytest.approx(0.126928, abs=1e-6)


def test_causal_equidistant_is_ln2():
    protos = compute_prototypes(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1], 2)
    loss, _ = loss_causal(np.array([[1.0, 1.0]]), [0], 2, prototypes=protos)
    assert loss == pytest.approx(np.log(2.0), abs=1e-12)


def test_causal_needs_two_classes():
    with pytest.raises(DegenerateBatchError):
        loss_causal(np.ones((3, 2)), [1, 1, 1], 3)


@pytest.mark.parametrize("exclude_target", [False, True])
def test_causal_gradient_through_prototypes(exclude_target):
    gen = np.random.default_rng(0)
    for _ in range(10):
        z = gen.normal(size=(9, 4))
        y = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2])
        loss, g = loss_causal(z, y, 3, exclude_target=exclude_target)
        assert np.isfinite(loss)
        assert fd(lambda a: loss_causal(a, y, 3, exclude_target=exclude_target)[0], g, z) < 1e-5


def test_causal_gradient_fixed_prototypes():
    gen = np.random.default_rng(1)
    z = gen.normal(size=(6, 3))
    y = np.array([0, 1, 0, 1, 2, 2])
    protos = compute_prototypes(gen.normal(size=(3, 3)), [0, 1, 2], 3)
    _, g = loss_causal(z, y, 3, prototypes=protos)
    assert fd(lambda a: loss_causal(a, y, 3, prototypes=protos)[0], g, z) < 1e-5


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 10_000))
def test_causal_scale_invariant(scale, seed):
    gen = np.random.default_rng(seed)
    z = gen.normal(size=(8, 3))
    y = np.arange(8) % 3
    assert abs(loss_causal(scale * z, y, 3)[0] - loss_causal(z, y, 3)[0]) < 1e-10


# --- non-causal loss --------------------------------------------------------------

def test_noncausal_examples():
    assert loss_noncausal(np.ones((4, 2)), [0] * 4, 2)[0] == pytest.approx(0.99, abs=1e-12)
    loss, _ = loss_noncausal(np.array([[0.0], [1.0]]), [0, 0], 1, eps=0.0)
    assert loss == pytest.approx(0.5, abs=1e-12)
    loss, _ = loss_noncausal(np.array([[-1.0], [1.0]]), [0, 0], 1, eps=0.0)
    assert loss == 0.0


def test_noncausal_excludes_singletons_and_errors():
    z = np.array([[0.0], [1.0], [5.0]])
    assert loss_noncausal(z, [0, 0, 1], 2, eps=0.0)[0] == pytest.approx(0.5)
    with pytest.raises(DegenerateBatchError):
        loss_noncausal(z, [0, 1, 2], 3)


def test_noncausal_gradient():
    gen = np.random.default_rng(2)
    for _ in range(10):
        z = 0.3 * gen.normal(size=(10, 3))
        y = np.arange(10) % 3
        _, g = loss_noncausal(z, y, 3)
        assert fd(lambda a: loss_noncausal(a, y, 3)[0], g, z) < 1e-5


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (6, 2), elements=st.floats(-10, 10)))
def test_noncausal_in_unit_interval(z):
    loss, g = loss_noncausal(z, [0, 0, 0, 1, 1, 1], 2)
    assert 0.0 <= loss <= 1.0
    assert np.all(np.isfinite(g))


# --- classification ---------------------------------------------------------------

def test_classification_examples():
    assert loss_classification(np.zeros((3, 4)), [0, 1, 2])[0] == pytest.approx(np.log(4.0), abs=1e-12)
    assert loss_classification(np.array([[20.0, 0.0]]), [0])[0] < 1e-8
    with pytest.raises(LabelError):
        loss_classification(np.zeros((1, 3)), [3])


def test_classification_gradient():
    gen = np.random.default_rng(3)
    logits = gen.normal(size=(5, 4))
    y = np.array([0, 3, 1, 1, 2])
    loss, g = loss_classification(logits, y)
    sm = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(g, (sm - np.eye(4)[y]) / 5, atol=1e-15)
    assert fd(lambda a: loss_classification(a, y)[0], g, logits) < 1e-6
    np.testing.assert_allclose(per_sample_ce(logits, y).mean(), loss, atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 3), elements=st.floats(-50, 50)))
def test_classification_nonnegative(logits):
    assert loss_classification(logits, [0, 1, 2])[0] >= 0.0


# --- reconstruction ----------------------------------------------------------------

def test_reconstruction_examples():
    x = np.ones((1, 3))
    zero = [np.zeros((1, 2))]
    assert loss_reconstruction(x, x, zero, zero)[0] == 0.0
    total, mse, kl, *_ = loss_reconstruction(x, x, [np.array([[1.0, 0.0]])], zero, beta_kl=1.0)
    assert kl == pytest.approx(0.5, abs=1e-15) and total == pytest.approx(0.5, abs=1e-15)
    total, mse, *_ = loss_reconstruction(x, np.zeros((1, 3)), zero, zero)
    assert mse == 1.0


def test_reconstruction_kl_sign_and_nonfinite():
    x = np.zeros((1, 2))
    mu = [np.array([[1.0]])]
    lv = [np.array([[0.0]])]
    assert loss_reconstruction(x, x, mu, lv, beta_kl=1.0, kl_sign=-1.0)[0] == pytest.approx(-0.5)
    with pytest.raises(NumericError):
        loss_reconstruction(x, x, mu, [np.array([[np.inf]])])


def test_reconstruction_gradients():
    gen = np.random.default_rng(4)
    x, xh = gen.normal(size=(4, 3)), gen.normal(size=(4, 3))
    mu, lv = gen.normal(size=(4, 2)), 0.5 * gen.normal(size=(4, 2))
    _, _, _, gx, gmu, glv = loss_reconstruction(x, xh, [mu], [lv])
    assert fd(lambda a: loss_reconstruction(x, a, [mu], [lv])[0], gx, xh) < 1e-6
    assert fd(lambda a: loss_reconstruction(x, xh, [a], [lv])[0], gmu[0], mu) < 1e-6
    assert fd(lambda a: loss_reconstruction(x, xh, [mu], [a])[0], glv[0], lv) < 1e-6


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-5, 5)),
       arrays(np.float64, (2, 3), elements=st.floats(-5, 5)))
def test_kl_nonnegative_zero_only_at_standard_normal(mu, lv):
    kl, _, _ = gaussian_kl(mu, lv)
    assert kl >= 0.0
    if np.abs(mu).max() > 1e-3 or np.abs(lv).max() > 1e-3:
        assert kl > 0.0
    assert gaussian_kl(np.zeros_like(mu), np.zeros_like(lv))[0] == 0.0
