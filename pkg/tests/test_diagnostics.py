import numpy as np
import pytest
from scipy.stats import gamma, norm

from nginla.diagnostics import effective_params, skld
from nginla.errors import DimensionMismatch, DisjointSupport
from nginla.gaussian_approx import find_mode
from nginla.linalg import SpdMatrix
from nginla.marginals import PosteriorMarginal, interp_density, summarize


def normal_marginal(mu=0.0, sd=1.0, n=2001, span=10.0):
    x = np.linspace(mu - span * sd, mu + span * sd, n)
    return PosteriorMarginal(x, norm.pdf(x, mu, sd))


def approx_with_curvature(Qd, lam):
    n = Qd.shape[0]

    def terms(x):
        return float(-0.5 * np.sum(lam * x * x)), -lam * x, -lam * np.ones(n)

    return find_mode(SpdMatrix(Qd), terms, np.zeros(n))


def test_eeff_zero_without_likelihood():
    Q = 2.0 * np.eye(4)
    assert effective_params(SpdMatrix(Q), approx_with_curvature(Q, np.zeros(4))) == pytest.approx(0.0, abs=1e-12)


def test_eeff_closed_form():
    n, tau, lam = 6, 2.0, 3.0
    Q = tau * np.eye(n)
    e = effective_params(SpdMatrix(Q), approx_with_curvature(Q, np.full(n, lam)))
    assert e == pytest.approx(n * lam / (tau + lam), rel=1e-12)


def test_eeff_dimension_checked():
    with pytest.raises(DimensionMismatch):
        effective_params(SpdMatrix(np.eye(3)), approx_with_curvature(np.eye(2), np.ones(2)))


def test_eeff_monotone_in_curvature(rng):
    for _ in range(20):
        n = int(rng.integers(2, 10))
        B = rng.normal(size=(n, n))
        Q = B @ B.T + np.eye(n)
        c = rng.uniform(0, 2, n)
        lo = effective_params(SpdMatrix(Q), approx_with_curvature(Q, c))
        hi = effective_params(SpdMatrix(Q), approx_with_curvature(Q, c + rng.uniform(0, 1, n)))
        assert hi >= lo - 1e-12
        assert 0 <= lo <= n


def test_skld_identical_is_zero():
    p = normal_marginal()
    assert skld(p, p) < 1e-10


def test_skld_unit_gaussians():
    p, q = normal_marginal(0.0), normal_marginal(1.0)
    assert skld(p, q) == pytest.approx(1.0, abs=1e-4)
    assert skld(p, q) == skld(q, p)


def test_skld_nonnegative(rng):
    for _ in range(10):
        p = normal_marginal(rng.normal(), rng.uniform(0.5, 2))
        q = normal_marginal(rng.normal(), rng.uniform(0.5, 2))
        assert skld(p, q) >= 0


def test_skld_disjoint():
    p = PosteriorMarginal(np.linspace(0, 1, 11), np.ones(11))
    q = PosteriorMarginal(np.linspace(2, 3, 11), np.ones(11))
    with pytest.raises(DisjointSupport):
        skld(p, q)


def test_summarize_standard_normal():
    mean, sd, lo, med, hi = summarize(normal_marginal())
    assert abs(mean) < 1e-6 and abs(sd - 1.0) < 1e-3 and abs(med) < 1e-6
    assert lo == pytest.approx(-1.959964, abs=1e-3) and hi == pytest.approx(1.959964, abs=1e-3)


def test_summarize_translation():
    x = np.linspace(-3, 7, 301)
    f = np.exp(-np.abs(x - 1.0)) * (1 + 0.3 * np.sin(x))
    a = summarize(PosteriorMarginal(x, f))
    b = summarize(PosteriorMarginal(x + 2.5, f))
    assert b[0] - a[0] == pytest.approx(2.5, abs=1e-12)
    assert b[1] == pytest.approx(a[1], abs=1e-12)


def test_summarize_gamma():
    x = np.linspace(1e-6, 40, 40001)
    m = PosteriorMarginal(x, gamma.pdf(x, 2.0))
    assert m.mean == pytest.approx(2.0, abs=1e-3)
    assert m.sd == pytest.approx(np.sqrt(2.0), abs=1e-3)


def test_marginal_validation():
    with pytest.raises(ValueError):
        PosteriorMarginal(np.array([0.0, 0.0, 1.0]), np.ones(3))
    with pytest.raises(ValueError):
        PosteriorMarginal(np.array([0.0, 1.0]), np.array([1.0, -1.0]))
    with pytest.raises(ValueError):
        PosteriorMarginal(np.array([0.0, 1.0]), np.zeros(2))


def test_marginal_is_normalized():
    m = PosteriorMarginal(np.linspace(0, 2, 5), 3.0 * np.ones(5))
    assert m.integral() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(m.densities, 0.5)


def test_interp_density_no_overshoot():
    x = np.linspace(-3, 3, 13)
    f = np.where(x < 0.4, norm.pdf(x), 1e-8)  # a truncated table with a kink
    m = PosteriorMarginal(x, f)
    q = np.linspace(-3, 3, 601)
    v = interp_density(m, q)
    assert np.all(v <= m.densities.max() * (1 + 1e-12))
    assert np.all(interp_density(m, np.array([-4.0, 4.0])) == 0.0)
