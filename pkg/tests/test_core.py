import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sigattn.core import (
    Rng,
    as_matrix,
    frobenius_norm,
    matmul,
    row_softmax,
    sigmoid_via_tanh,
    spectral_norm,
)

finite = st.floats(min_value=-10, max_value=10, allow_nan=False)


def test_matmul_examples():
    m = np.array([[1.5, -2.0], [0.25, 3.0]])
    np.testing.assert_array_equal(matmul(np.eye(2), m), m)
    np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])
    np.testing.assert_array_equal(matmul(np.zeros((3, 2)), m), np.zeros((3, 2)))


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_overflow_reported():
    big = np.full((2, 2), 1e308)
    with pytest.raises(FloatingPointError):
        matmul(big, big)


def test_as_matrix_rejects_nan():
    with pytest.raises(FloatingPointError):
        as_matrix([[1.0, np.nan]])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32))
def test_matmul_associative(m, k, l, n, seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.standard_normal((m, k)), rng.standard_normal((k, l)), rng.standard_normal((l, n))
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))
    assert frobenius_norm(left - right) <= 1e-9 * max(1.0, frobenius_norm(left))


def test_sigmoid_examples():
    assert sigmoid_via_tanh(0.0) == 0.5
    assert abs(sigmoid_via_tanh(50.0) - 1.0) <= 1e-15
    assert sigmoid_via_tanh(1.0) == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-15)
    assert sigmoid_via_tanh(1.0) == pytest.approx(0.731058578, abs=1e-9)


@given(st.floats(min_value=-30, max_value=30))
def test_sigmoid_symmetry(x):
    assert abs(sigmoid_via_tanh(x) + sigmoid_via_tanh(-x) - 1.0) <= 1e-15


@given(st.floats(min_value=-30, max_value=30), st.floats(min_value=1e-6, max_value=5))
def test_sigmoid_monotone(x, dx):
    assert sigmoid_via_tanh(x + dx) >= sigmoid_via_tanh(x)


def test_sigmoid_vectorized_matches_scalar():
    xs = np.linspace(-20, 20, 41)
    np.testing.assert_array_equal(sigmoid_via_tanh(xs), [sigmoid_via_tanh(float(x)) for x in xs])


def test_row_softmax_examples():
    np.testing.assert_array_equal(row_softmax([[3.7]]), [[1.0]])
    np.testing.assert_array_equal(row_softmax([[0.0, 0.0]]), [[0.5, 0.5]])
    out = row_softmax([[math.log(1), math.log(2), math.log(3)]])
    np.testing.assert_allclose(out, [[1 / 6, 2 / 6, 3 / 6]], atol=1e-12, rtol=0)


def test_row_softmax_mask():
    mask = np.array([[1, 0, 1], [0, 1, 0]])
    out = row_softmax(np.zeros((2, 3)), mask)
    np.testing.assert_array_equal(out, [[0.5, 0.0, 0.5], [0.0, 1.0, 0.0]])
    with pytest.raises(ValueError):
        row_softmax(np.zeros((1, 2)), np.zeros((1, 2)))


@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_row_softmax_rows_sum_to_one(m):
    out = row_softmax(m)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12, rtol=0)
    assert np.all(out >= 0)


def test_spectral_norm_examples():
    assert spectral_norm(np.diag([3.0, 1.0])) == pytest.approx(3.0, abs=1e-9)
    assert spectral_norm(np.zeros((3, 3))) == 0.0
    assert spectral_norm(np.array([[0.0, 2.0], [0.0, 0.0]])) == pytest.approx(2.0, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32), st.floats(-5, 5))
def test_spectral_norm_properties(r, c, seed, scale):
    m = np.random.default_rng(seed).standard_normal((r, c))
    s = spectral_norm(m)
    # independent oracle: LAPACK SVD
    assert s == pytest.approx(np.linalg.svd(m, compute_uv=False)[0], rel=1e-6)
    assert s <= frobenius_norm(m) + 1e-9
    assert spectral_norm(scale * m) == pytest.approx(abs(scale) * s, rel=1e-6, abs=1e-9)


def test_frobenius_examples():
    assert frobenius_norm(np.zeros((2, 2))) == 0.0
    assert frobenius_norm([[3.0, 4.0]]) == 5.0
    assert frobenius_norm(np.eye(7)) == pytest.approx(math.sqrt(7), abs=1e-15)


def test_rng_normal():
    assert np.all(Rng(1).normal(3, 4, mean=2.5, std=0.0) == 2.5)
    np.testing.assert_array_equal(Rng(42).normal(5, 5), Rng(42).normal(5, 5))
    assert not np.array_equal(Rng(42).normal(5, 5), Rng(43).normal(5, 5))


def test_rng_normal_mean_clt():
    n = 10**6
    x = Rng(3).normal(1, n, mean=1.5, std=2.0)
    assert abs(x.mean() - 1.5) <= 4 * 2.0 / math.sqrt(n)


def test_rng_truncated():
    x = Rng(5).normal(100, 100, mean=0.0, std=0.02, truncate_at=2.0)
    assert np.all(np.abs(x) <= 0.04)
    assert x.std() == pytest.approx(0.02 * 0.88, rel=0.05)  # std of N(0,1) truncated at 2 is 0.8796
