import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dtipo import autodiff as ad
from dtipo.autodiff import Tape, Tensor


def fd_matches(f, params, tol=1e-6, step=1e-6):
    rev, fd = ad.gradient_check(f, params, step)
    for r, n in zip(rev, fd):
        np.testing.assert_allclose(r, n, rtol=tol, atol=tol)


def test_arithmetic_and_broadcasting(rng):
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(3,))
    c = rng.uniform(1, 2, size=(4, 1))
    fd_matches(lambda p: ad.reduce_sum((p[0] + p[1]) * p[0] / p[2] - p[1] * 2.0), [a, b, c])


def test_affine_batch_and_single(rng):
    x = rng.normal(size=(5, 3))
    w = rng.normal(size=(3, 2))
    b = rng.normal(size=2)
    fd_matches(lambda p: ad.reduce_sum(ad.sigmoid(ad.affine(p[0], p[1], p[2]))), [x, w, b])
    fd_matches(lambda p: ad.reduce_sum(ad.affine(p[0], p[1], p[2]) * 3.0), [x[0], w, b])


def test_affine_shape_mismatch():
    with pytest.raises(ValueError):
        ad.affine(np.ones((2, 3)), np.ones((2, 2)), np.ones(2))


def test_smooth_nonlinearities(rng):
    x = rng.normal(size=6)
    fd_matches(lambda p: ad.reduce_sum(ad.exp(p[0]) + ad.sigmoid(p[0] * 3.0)), [x])


def test_relu_and_abs_away_from_kinks():
    x = np.array([-1.5, -0.3, 0.2, 0.9])
    fd_matches(lambda p: ad.reduce_sum(ad.relu(p[0]) * 2.0 + ad.absolute(p[0])), [x])


def test_reductions(rng):
    x = rng.normal(size=(7,))
    fd_matches(lambda p: ad.reduce_variance(p[0]) + ad.reduce_mean(p[0]), [x])
    y = rng.normal(size=(3, 4))
    fd_matches(lambda p: ad.reduce_sum(ad.reduce_sum(p[0], axis=1) * np.arange(3.0)), [y])


def test_indexing_stack_concat(rng):
    x = rng.normal(size=(4, 3))
    fd_matches(lambda p: ad.reduce_sum(ad.stack([p[0][:, 0], p[0][:, 2]], axis=1) * 2.0)
               + ad.reduce_sum(ad.concat([p[0][0], p[0][3]]) * p[0][1, 1]), [x])


def test_tail_mean_values_and_ties():
    x = Tensor(np.array([3.0, 1.0, 1.0, 5.0, 5.0]))
    assert ad.tail_mean(x, 2, "lower").item() == 1.0
    assert ad.tail_mean(x, 3, "upper").item() == pytest.approx(13 / 3)
    tape = Tape()
    leaf = tape.leaf(np.array([3.0, 1.0, 1.0, 5.0, 5.0]))
    g, = tape.backward(ad.tail_mean(leaf, 1, "upper"), [leaf])
    # ties go to the lower index
    np.testing.assert_array_equal(g, [0, 0, 0, 1, 0])


def test_tail_mean_gradient(rng):
    x = rng.normal(size=9)
    fd_matches(lambda p: ad.tail_mean(p[0], 3, "lower") - ad.tail_mean(p[0], 2, "upper"), [x])


def test_tail_mean_bad_k():
    with pytest.raises(ValueError):
        ad.tail_mean(Tensor(np.ones(3)), 4)


def test_backward_only_once():
    tape = Tape()
    x = tape.leaf(np.array(2.0))
    y = x * x
    assert tape.backward(y, [x])[0] == pytest.approx(4.0)
    with pytest.raises(ad.TapeError):
        tape.backward(y, [x])
    with pytest.raises(ad.TapeError):
        tape.leaf(1.0)


def test_backward_needs_scalar():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ad.TapeError):
        tape.backward(x * 2.0, [x])


def test_unused_leaf_gets_zero_gradient():
    tape = Tape()
    x, y = tape.leaf(np.ones(2)), tape.leaf(np.ones(3))
    gx, gy = tape.backward(ad.reduce_sum(x), [x, y])
    np.testing.assert_array_equal(gy, np.zeros(3))


def test_non_finite_values_raise():
    with pytest.raises(ad.NonFiniteError):
        Tensor(np.array([1.0, np.nan]))
    tape = Tape()
    x = tape.leaf(np.array([1000.0]))
    with pytest.raises(ad.NonFiniteError):
        ad.exp(x)


def test_division_by_zero():
    with pytest.raises(ZeroDivisionError):
        ad.div(Tensor(1.0), Tensor(np.array([0.0, 1.0])))


def test_mixing_tapes_is_an_error():
    a, b = Tape().leaf(1.0), Tape().leaf(2.0)
    with pytest.raises(ad.TapeError):
        a + b


def test_pattern_digest_tracks_relu_masks():
    def digest(v):
        tape = Tape()
        ad.relu(tape.leaf(np.array(v)))
        return tape.pattern_digest()

    assert digest([1.0, -1.0]) == digest([2.0, -0.5])
    assert digest([1.0, -1.0]) != digest([-1.0, -1.0])


finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@given(arrays(np.float64, st.integers(2, 6), elements=finite), arrays(np.float64, 3, elements=finite))
def test_composite_gradient_matches_finite_differences(x, w):
    def f(p):
        h = ad.sigmoid(ad.reshape(p[0], (p[0].shape[0], 1)) * ad.reshape(p[1], (1, 3)))
        return ad.reduce_variance(ad.reduce_sum(h * h, axis=1)) + ad.reduce_mean(ad.exp(p[1] * 0.1))

    fd_matches(f, [x, w], tol=1e-5)


@given(arrays(np.float64, st.integers(1, 8), elements=finite))
def test_sum_gradient_is_ones(x):
    tape = Tape()
    leaf = tape.leaf(x)
    g, = tape.backward(ad.reduce_sum(leaf), [leaf])
    np.testing.assert_array_equal(g, np.ones_like(x))
