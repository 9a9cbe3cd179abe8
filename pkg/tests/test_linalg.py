import numpy as np
import pytest
import scipy.sparse as sp

from nginla.errors import DimensionMismatch, NotPositiveDefinite
from nginla.linalg import SpdMatrix, cholesky, inverse, logdet, marginal_variances, solve

METHODS = ("dense", "sparse")


def random_spd(rng, n, density=1.0):
    B = rng.normal(size=(n, n))
    if density < 1.0:
        B *= rng.random((n, n)) < density
    return B @ B.T + np.diag(rng.uniform(0.5, 2.0, n))


@pytest.mark.parametrize("method", METHODS)
def test_identity_factor(method):
    f = cholesky(np.eye(3), method=method)
    np.testing.assert_array_equal(f.lower, np.eye(3))


@pytest.mark.parametrize("method", METHODS)
def test_two_by_two_factor(method):
    Q = np.array([[4.0, 2.0], [2.0, 3.0]])
    L = cholesky(Q, method=method).lower
    np.testing.assert_allclose(L, [[2.0, 0.0], [1.0, np.sqrt(2.0)]], rtol=1e-15)
    np.testing.assert_allclose(L @ L.T, Q, rtol=1e-15)


@pytest.mark.parametrize("method", METHODS)
def test_indefinite_raises(method):
    with pytest.raises(NotPositiveDefinite):
        cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]), method=method)


def test_tiny_pivot_is_not_positive_definite():
    Q = np.diag([1.0, 1e-15])
    with pytest.raises(NotPositiveDefinite) as info:
        cholesky(Q, method="dense")
    assert info.value.column == 1


def test_asymmetric_input_rejected():
    with pytest.raises(ValueError):
        SpdMatrix(np.array([[1.0, 0.5], [0.4, 1.0]]))


def test_non_square_rejected():
    with pytest.raises(DimensionMismatch):
        SpdMatrix(np.ones((2, 3)))


@pytest.mark.parametrize("method", METHODS)
def test_solve_small_cases(method):
    np.testing.assert_allclose(solve(cholesky(np.eye(3), method=method), [1.0, 2.0, 3.0]), [1, 2, 3])
    np.testing.assert_allclose(solve(cholesky(np.diag([4.0, 4.0]), method=method), [8.0, 8.0]), [2, 2])


@pytest.mark.parametrize("method", METHODS)
def test_solve_dimension_mismatch(method):
    with pytest.raises(DimensionMismatch):
        solve(cholesky(np.eye(3), method=method), np.ones(4))


@pytest.mark.parametrize("method", METHODS)
def test_random_solve_residual(rng, method):
    Q = random_spd(rng, 20)
    b = rng.normal(size=20)
    x = solve(cholesky(Q, method=method), b)
    assert np.linalg.norm(Q @ x - b) / np.linalg.norm(b) < 1e-8


@pytest.mark.parametrize("method", METHODS)
def test_reconstruction_and_roundtrip(rng, method):
    for _ in range(20):
        n = int(rng.integers(1, 40))
        Q = random_spd(rng, n, density=0.15)
        f = cholesky(Q, method=method)
        L = f.lower
        assert np.all(np.diag(L) > 0)
        assert np.allclose(L, np.tril(L))
        assert np.linalg.norm(L @ L.T - Q) / np.linalg.norm(Q) < 1e-10
        x = rng.normal(size=n)
        np.testing.assert_allclose(solve(f, Q @ x), x, rtol=1e-8, atol=1e-8 * np.abs(x).max())


@pytest.mark.parametrize("method", METHODS)
def test_logdet_matches_eigenvalues(rng, method):
    for n in (1, 5, 12, 20):
        Q = random_spd(rng, n)
        ref = np.sum(np.log(np.linalg.eigvalsh(Q)))
        assert abs(logdet(cholesky(Q, method=method)) - ref) < 1e-8


@pytest.mark.parametrize("method", METHODS)
def test_marginal_variances_examples(method):
    np.testing.assert_allclose(marginal_variances(cholesky(np.eye(5), method=method)), np.ones(5))
    np.testing.assert_allclose(marginal_variances(cholesky(4 * np.eye(4), method=method)), np.full(4, 0.25))


@pytest.mark.parametrize("method", METHODS)
def test_marginal_variances_vs_inverse(rng, method):
    Q = random_spd(rng, 30)
    v = marginal_variances(cholesky(Q, method=method))
    ref = np.diag(np.linalg.inv(Q))
    assert np.all(v > 0)
    assert np.max(np.abs(v - ref) / ref) < 1e-10
    np.testing.assert_allclose(inverse(cholesky(Q, method=method)), np.linalg.inv(Q), rtol=1e-9, atol=1e-12)


def test_sparse_input_and_matvec(rng):
    A = sp.random(15, 15, density=0.2, random_state=3)
    Q = (A @ A.T + sp.identity(15)).tocsc()
    S = SpdMatrix(Q)
    v = rng.normal(size=15)
    np.testing.assert_allclose(S @ v, Q @ v, rtol=1e-13)
    np.testing.assert_allclose(S.toarray(), Q.toarray())
    np.testing.assert_allclose(S.add_diagonal(np.ones(15)).diagonal(), Q.diagonal() + 1.0)


def test_dense_and_sparse_factors_agree(rng):
    Q = random_spd(rng, 25, density=0.1)
    a, b = cholesky(Q, method="dense"), cholesky(Q, method="sparse")
    assert b.is_sparse and not a.is_sparse
    np.testing.assert_allclose(a.lower, b.lower, atol=1e-12)
    assert abs(a.logdet() - b.logdet()) < 1e-10
