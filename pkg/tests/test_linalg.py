from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snmnet import linalg
from snmnet.errors import (
    DegenerateSampleError,
    FactorizationError,
    InvalidInputError,
    ShapeError,
)
from tests.helpers import random_spd


def outer_product_covariance(X, mu):
    n, d = X.shape
    S = np.zeros((d, d))
    for row in X:
        diff = row - mu
        for i in range(d):
            for j in range(d):
                S[i, j] += diff[i] * diff[j]
    return S / (n - 1)


class TestSampleCovariance:
    def test_identical_rows_give_zero(self, backend):
        X = np.array([[1.5, -2.0, 3.0], [1.5, -2.0, 3.0]])
        S = linalg.sample_covariance(X, X[0])
        assert np.array_equal(S, np.zeros((3, 3)))

    def test_cross_pattern(self, backend):
        X = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        S = linalg.sample_covariance(X, np.zeros(2))
        np.testing.assert_allclose(S, np.diag([2 / 3, 2 / 3]), atol=1e-15)

    def test_matches_outer_product_oracle(self, backend, rng):
        X = rng.standard_normal((5, 3))
        mu = X.mean(axis=0)
        S = linalg.sample_covariance(X, mu)
        assert np.max(np.abs(S - outer_product_covariance(X, mu))) < 1e-12

    def test_exactly_symmetric(self, backend, rng):
        X = rng.standard_normal((40, 17)) * rng.uniform(0.1, 10, size=17)
        S = linalg.sample_covariance(X, X.mean(axis=0))
        assert np.array_equal(S, S.T)

    def test_single_row_rejected(self, backend):
        with pytest.raises(DegenerateSampleError):
            linalg.sample_covariance(np.ones((1, 3)), np.ones(3))

    def test_nan_rejected(self, backend):
        X = np.ones((3, 2))
        X[1, 1] = np.nan
        with pytest.raises(InvalidInputError):
            linalg.sample_covariance(X, np.zeros(2))

    def test_mu_length_checked(self, backend):
        with pytest.raises(ShapeError):
            linalg.sample_covariance(np.ones((3, 2)), np.zeros(3))


class TestRegularize:
    def test_zero_matrix(self):
        np.testing.assert_array_equal(linalg.regularize(np.zeros((3, 3)), 1e-4), 1e-4 * np.eye(3))

    def test_zero_lambda_is_identity_op(self, rng):
        A = rng.standard_normal((4, 4))
        np.testing.assert_array_equal(linalg.regularize(A, 0.0), A)

    def test_default_lambda(self):
        assert linalg.DEFAULT_LAMBDA == 1e-4
        np.testing.assert_array_equal(linalg.regularize(np.zeros((2, 2))), 1e-4 * np.eye(2))

    def test_non_square(self):
        with pytest.raises(ShapeError):
            linalg.regularize(np.zeros((2, 3)), 1.0)

    def test_input_untouched(self):
        A = np.zeros((2, 2))
        linalg.regularize(A, 1.0)
        assert not A.any()


class TestCholesky:
    def test_identity(self, backend):
        np.testing.assert_array_equal(linalg.cholesky(np.eye(5)), np.eye(5))

    def test_two_by_two(self, backend):
        L = linalg.cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]))
        np.testing.assert_allclose(L, [[2.0, 0.0], [1.0, math.sqrt(2.0)]], rtol=0, atol=1e-15)

    def test_rank_deficient_fails_with_pivot(self, backend):
        v = np.array([1.0, 2.0, 3.0])
        A = np.outer(v, v)  # rank 1
        with pytest.raises(FactorizationError) as info:
            linalg.cholesky(linalg.regularize(A, 0.0))
        assert info.value.pivot == 1
        assert "pivot 1" in str(info.value)

    def test_indefinite_first_pivot(self, backend):
        with pytest.raises(FactorizationError) as info:
            linalg.cholesky(np.array([[-1.0, 0.0], [0.0, 1.0]]))
        assert info.value.pivot == 0

    @pytest.mark.parametrize("d", [1, 2, 7, 31, 64])
    def test_reconstruction(self, backend, rng, d):
        A = random_spd(rng, d)
        L = linalg.cholesky(A)
        assert np.array_equal(L, np.tril(L))
        assert np.all(np.diag(L) > 0)
        err = np.linalg.norm(L @ L.T - A) / np.linalg.norm(A)
        assert err < 1e-10

    def test_backends_agree(self, rng):
        if len(linalg.available_backends()) < 2:
            pytest.skip("compiled kernels not built")
        A = random_spd(rng, 20)
        out = {}
        for name in linalg.available_backends():
            linalg.use_backend(name)
            out[name] = linalg.cholesky(A)
        linalg.use_backend("compiled")
        np.testing.assert_allclose(out["compiled"], out["python"], rtol=1e-12, atol=1e-13)


class TestSolveLower:
    def test_identity(self, backend, rng):
        b = rng.standard_normal(6)
        np.testing.assert_array_equal(linalg.solve_lower(np.eye(6), b), b)

    def test_hand_example(self, backend):
        y = linalg.solve_lower(np.array([[2.0, 0.0], [1.0, 1.0]]), np.array([2.0, 3.0]))
        np.testing.assert_array_equal(y, [1.0, 2.0])

    def test_residual_random_spd(self, backend, rng):
        L = linalg.cholesky(random_spd(rng, 6))
        b = rng.standard_normal(6)
        y = linalg.solve_lower(L, b)
        assert np.max(np.abs(L @ y - b)) < 1e-10

    def test_dimension_mismatch(self, backend):
        with pytest.raises(ShapeError):
            linalg.solve_lower(np.eye(3), np.ones(4))

    def test_rows_match_single_solves(self, backend, rng):
        L = linalg.cholesky(random_spd(rng, 9))
        B = rng.standard_normal((5, 9))
        Y = linalg.solve_lower_rows(L, B)
        for r in range(5):
            np.testing.assert_allclose(Y[r], linalg.solve_lower(L, B[r]), rtol=1e-13, atol=1e-13)


@settings(max_examples=40, deadline=None)
@given(d=st.integers(2, 64), seed=st.integers(0, 2**32 - 1))
def test_mahalanobis_matches_explicit_inverse(d, seed):
    rng = np.random.default_rng(seed)
    sigma = linalg.regularize(random_spd(rng, d), 1e-4)
    f, mu = rng.standard_normal(d), rng.standard_normal(d)
    y = linalg.solve_lower(linalg.cholesky(sigma), f - mu)
    diff = f - mu
    oracle = diff @ np.linalg.inv(sigma) @ diff
    assert abs(y @ y - oracle) / oracle < 1e-8


def test_mahalanobis_rows_identity_equals_row_norms(backend, rng):
    D = rng.standard_normal((30, 8))
    mu = rng.standard_normal(8)
    a = linalg.mahalanobis_rows(np.eye(8), mu, D)
    b = linalg.row_norms(D - mu)
    assert np.array_equal(a, b)
