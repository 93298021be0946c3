import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfgp import linalg
from mfgp.errors import DimensionMismatch, NotPositiveDefinite

A = np.array([[4.0, 2.0], [2.0, 3.0]])


def test_identity_factor():
    f = linalg.cholesky(np.eye(3))
    np.testing.assert_array_equal(f.lower, np.eye(3))
    assert f.jitter_used == 0.0


def test_two_by_two_factor():
    f = linalg.cholesky(A)
    np.testing.assert_allclose(f.lower, [[2.0, 0.0], [1.0, np.sqrt(2.0)]], atol=1e-14)


def test_indefinite_exhausts_ladder():
    with pytest.raises(NotPositiveDefinite):
        linalg.cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_asymmetric_rejected():
    with pytest.raises(DimensionMismatch):
        linalg.cholesky(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_tiny_asymmetry_is_symmetrized():
    a = A.copy()
    a[0, 1] += 1e-14
    np.testing.assert_allclose(linalg.cholesky(a).lower @ linalg.cholesky(a).lower.T,
                               A, atol=1e-12)


def test_singular_uses_jitter_deterministically():
    a = np.ones((3, 3))
    f1, f2 = linalg.cholesky(a), linalg.cholesky(a)
    assert f1.jitter_used > 0
    assert f1.jitter_used == f2.jitter_used
    assert f1.jitter_used == pytest.approx(1e-8 * 10 ** round(np.log10(f1.jitter_used / 1e-8)))


def test_triangular_solves():
    f = linalg.cholesky(A)
    np.testing.assert_allclose(linalg.tri_solve(f, [2.0, 1 + np.sqrt(2.0)]), [1.0, 1.0])
    np.testing.assert_allclose(linalg.cho_solve(f, [1.0, 0.0]), [0.375, -0.25])
    b = np.array([1.0, -2.0])
    np.testing.assert_allclose(linalg.tri_solve(linalg.cholesky(np.eye(2)), b), b)
    with pytest.raises(DimensionMismatch):
        linalg.tri_solve(f, np.ones(3))


def test_log_det_examples():
    assert linalg.log_det(linalg.cholesky(np.eye(4))) == 0.0
    assert linalg.log_det(linalg.cholesky(np.diag([4.0, 9.0]))) == pytest.approx(np.log(36))
    assert linalg.log_det(linalg.cholesky(A)) == pytest.approx(np.log(8))


def _spd(seed, n, rank_deficient=False):
    rng = np.random.default_rng(seed)
    b = rng.normal(size=(n, n - 1 if rank_deficient else n))
    return b @ b.T + (0.0 if rank_deficient else 1e-3 * np.eye(n))


@given(st.integers(0, 10**6), st.integers(1, 12), st.booleans())
def test_reconstruction(seed, n, deficient):
    if deficient and n < 2:
        return
    a = _spd(seed, n, deficient)
    f = linalg.cholesky(a)
    err = np.linalg.norm(f.lower @ f.lower.T - (a + f.jitter_used * np.eye(n))) / np.linalg.norm(a)
    assert err <= 1e-8


@given(st.integers(0, 10**6), st.integers(1, 12))
def test_solve_recovers_rhs(seed, n):
    a = _spd(seed, n)
    f = linalg.cholesky(a)
    b = np.random.default_rng(seed + 1).normal(size=n)
    x = linalg.tri_solve(f, b)
    assert np.linalg.norm(f.lower @ x - b) <= 1e-10 * max(np.linalg.norm(b), 1.0)
    y = linalg.tri_solve(f, b, "lower-transpose")
    assert np.linalg.norm(f.lower.T @ y - b) <= 1e-10 * max(np.linalg.norm(b), 1.0)
