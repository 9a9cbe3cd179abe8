import numpy as np
import pytest
from scipy.stats import gaussian_kde, norm

from nginla import bundled, sim
from nginla.diagnostics import skld
from nginla.errors import DegenerateGrid
from nginla.inla import (
    InlaOptions,
    LaplaceTheta,
    ThetaGrid,
    explore_theta,
    fit,
    hyperparam_marginal,
    integrate_marginals,
    latent_marginal_gaussian,
    latent_marginal_laplace,
    log_post_theta,
)
from nginla.marginals import PosteriorMarginal


@pytest.fixture(scope="module")
def gaussian_spec():
    rng = np.random.default_rng(21)
    g = np.repeat(np.arange(8), 4)
    z = rng.uniform(size=32)
    y = 2.0 + z + rng.normal(0, 1, 8)[g] + rng.normal(0, 0.5, 32)
    return bundled.gaussian_lgm(y, z, g)


@pytest.fixture(scope="module")
def tmm_spec():
    d = sim.simulate_tmm(sim.ContaminationCell(0.0, 0.1, 4.0), 3)
    return bundled.tmm_model(d.y, d.covariate, d.group)


@pytest.fixture(scope="module")
def small_survival():
    d = sim.simulate_survival(10, 5, seed=8)
    return bundled.survival_model(d.times, d.covariate, d.group)


def test_options_validated():
    with pytest.raises(ValueError):
        InlaOptions(strategy="simplified")
    with pytest.raises(ValueError):
        InlaOptions(grid_step=0.0)


def test_cache_is_bit_identical(small_survival):
    post = LaplaceTheta(small_survival)
    a = post(np.array([0.3]))
    b = post(np.array([0.3]))
    assert a is b
    fresh = log_post_theta(small_survival, np.array([0.3]))
    assert fresh[0] == a[0] and np.isfinite(a[0])
    np.testing.assert_array_equal(fresh[1].mean, a[1].mean)


def test_t_model_tails_decrease(tmm_spec):
    post = LaplaceTheta(tmm_spec)
    grid = explore_theta(tmm_spec, InlaOptions(), post)
    sd = np.sqrt(np.diag(np.linalg.inv(grid.hessian)))
    for j in range(3):
        for sgn in (-1, 1):
            steps = grid.mode[j] + sgn * sd[j] * np.arange(3, 9)
            vals = []
            for s in steps:
                t = grid.mode.copy()
                t[j] = s
                vals.append(post(t)[0])
            assert np.all(np.diff(vals) < 0), (j, sgn, vals)
    assert len(grid) < 500


def test_grid_respects_log_drop(small_survival):
    grid = explore_theta(small_survival)
    assert grid.dim == 1
    assert np.all(grid.mode_log_post - grid.log_post < 2.5)
    assert np.all(grid.mode_log_post >= grid.log_post - 1e-9)
    dropped = grid.evaluated_log_post[grid.mode_log_post - grid.evaluated_log_post >= 2.5]
    assert dropped.size == 2  # one beyond each end
    assert np.all(grid.weights > 0)
    assert grid.probs.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.all(np.diff(grid.z[:, 0]) == pytest.approx(0.75))


def test_exploration_is_deterministic(small_survival):
    a = explore_theta(small_survival)
    b = explore_theta(small_survival)
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(a.log_post, b.log_post)


def test_gaussian_marginal_matches_variance(gaussian_spec):
    grid = explore_theta(gaussian_spec)
    ga = grid.approximations[0]
    i = gaussian_spec.structure.n_data + 2
    m = latent_marginal_gaussian(i, ga)
    assert len(m.abscissae) == 101
    assert m.mean == pytest.approx(ga.mean[i], abs=1e-9)
    assert m.sd == pytest.approx(np.sqrt(ga.variances()[i]), rel=1e-3)
    dense = np.diag(np.linalg.inv(ga.precision.toarray()))[i]
    assert ga.variances()[i] == pytest.approx(dense, rel=1e-9)


def test_laplace_exact_for_gaussian_model(gaussian_spec):
    grid = explore_theta(gaussian_spec)
    theta, ga = grid.points[0], grid.approximations[0]
    for i in (gaussian_spec.structure.n_data, gaussian_spec.n - 1):
        g = latent_marginal_gaussian(i, ga)
        lap = latent_marginal_laplace(i, gaussian_spec, theta, ga)
        np.testing.assert_allclose(lap.abscissae, g.abscissae, rtol=1e-12)
        assert np.max(np.abs(lap.densities - g.densities)) < 1e-8


def test_warm_and_cold_laplace_agree(small_survival):
    grid = explore_theta(small_survival)
    k = int(np.argmax(grid.log_post))
    theta, ga = grid.points[k], grid.approximations[k]
    i = small_survival.structure.n_data + 1
    warm = latent_marginal_laplace(i, small_survival, theta, ga, warm=True)
    cold = latent_marginal_laplace(i, small_survival, theta, ga, warm=False)
    assert np.max(np.abs(warm.densities - cold.densities)) < 1e-8
    assert abs(warm.integral() - 1.0) < 1e-3


def test_integrate_single_point():
    m = PosteriorMarginal(np.linspace(-3, 3, 31), norm.pdf(np.linspace(-3, 3, 31)))
    out = integrate_marginals([1.0], [m])
    np.testing.assert_allclose(out.densities, m.densities, rtol=1e-14)


def test_integrate_symmetric_mixture():
    x = np.linspace(-8, 8, 801)
    ms = [PosteriorMarginal(x, norm.pdf(x, -1)), PosteriorMarginal(x, norm.pdf(x, 1))]
    out = integrate_marginals([0.5, 0.5], ms)
    assert abs(out.mean) < 1e-12
    assert out.sd == pytest.approx(np.sqrt(2.0), abs=1e-4)
    assert out.pdf(0.0) == pytest.approx(norm.pdf(1.0), rel=1e-12)


def quadratic_grid(mu=0.4, s=0.8, step=0.75):
    k = np.arange(-3, 4)
    z = (k * step)[:, None]
    pts = mu + s * z
    lp = -0.5 * z[:, 0] ** 2
    return ThetaGrid(
        points=pts, z=z, log_post=lp, weights=np.full(len(k), step * s), mode=np.array([mu]),
        mode_log_post=0.0, hessian=np.array([[1 / s**2]]), eigvals=np.array([1 / s**2]),
        eigvecs=np.eye(1), step=step, approximations=[None] * len(k), evaluated_z=z,
        evaluated_points=pts, evaluated_log_post=lp,
    )


def test_hyper_marginal_recovers_quadratic():
    g = quadratic_grid()
    m = hyperparam_marginal(g, 0)
    ref = norm.pdf(m.abscissae, 0.4, 0.8)
    ref /= np.trapezoid(ref, m.abscissae)
    assert np.max(np.abs(m.densities - ref)) < 1e-6


def test_hyper_marginal_degenerate():
    g = quadratic_grid()
    keep = slice(2, 4)
    g.evaluated_points = g.evaluated_points[keep]
    g.evaluated_z = g.evaluated_z[keep]
    g.evaluated_log_post = g.evaluated_log_post[keep]
    with pytest.raises(DegenerateGrid):
        hyperparam_marginal(g, 0)


def test_fit_gaussian_model(gaussian_spec):
    res = fit(gaussian_spec, InlaOptions(strategy="laplace", compare_strategies=True))
    for m in list(res.latent.values()) + list(res.hyper.values()):
        assert abs(m.integral() - 1.0) < 1e-3
    # the Laplace and Gaussian flavors coincide on a Gaussian model
    assert max(res.report.skld.values()) < 1e-8
    assert set(res.hyper) == {"tau_e", "tau_b"}
    assert res.report.grid_size == len(res.grid)
    np.testing.assert_allclose(res.latent_mean()[res.components], [res.latent[n].mean for n in res.names],
                               atol=1e-5)


def test_laplace_beats_gaussian_against_sampler(survival_fit, survival_chain):
    """Laplace-flavor frailty marginals sit closer to the sampler than the Gaussian flavor."""
    better = []
    for k in range(0, 50, 5):
        name = f"frailty[{k}]"
        kde = gaussian_kde(survival_chain.column(name))
        lap = survival_fit.latent[name]
        x = lap.abscissae
        ref = PosteriorMarginal(x, kde(x))
        better.append(skld(lap, ref) < skld(survival_fit.latent_other[name], ref))
    assert np.mean(better) >= 0.8
