import numpy as np
import pytest

from nginla import bundled, likelihoods as lk, sim
from nginla.errors import MaxIterationsExceeded, NonFiniteObjective
from nginla.gaussian_approx import ModeOptions, TrustState, find_mode, taylor_coeffs, trust_update
from nginla.likelihoods import TermEval
from nginla.linalg import SpdMatrix
from nginla.model import build_precision, gaussian_quadratic
from nginla.near_gaussian import extend_model


def test_taylor_quadratic():
    for mu0 in (-2.0, 0.0, 3.5):
        b, c = taylor_coeffs(TermEval(-0.5 * mu0**2, -mu0, -1.0), mu0)
        assert c == 1.0 and b == pytest.approx(0.0, abs=1e-15)


def test_taylor_exponential():
    b, c = taylor_coeffs(TermEval(*lk.exponential(0.0, 1.0)), 0.0)
    assert (b, c) == (0.0, 1.0)


def test_taylor_student_t_correction():
    b, c = taylor_coeffs(TermEval(*lk.ct_student_t(0.0, 1.0, 5.0, 0.0, 0.0)), 0.0)
    assert c == pytest.approx(1.2, rel=1e-14)
    assert b == pytest.approx(0.0, abs=1e-15)


def test_trust_update_rules():
    assert trust_update(TrustState(0.1), 0.9).delta == pytest.approx(0.025)
    s = trust_update(TrustState(0.0), -1.0)
    assert s.delta == 1e-3 and not s.accepted
    assert trust_update(TrustState(0.02), 0.1).delta == pytest.approx(0.08)
    assert trust_update(TrustState(0.02), 0.5).delta == 0.02
    assert trust_update(TrustState(0.02), 0.5).accepted


def test_trust_update_reaches_zero():
    s = TrustState(10.0)
    for _ in range(20):
        s = trust_update(s, 0.95)
    assert s.delta == 0.0
    assert s.step_count == 20


def test_trust_update_rejects_nan():
    with pytest.raises(ValueError):
        trust_update(TrustState(), float("nan"))


def gaussian_terms(idx, y, prec, n):
    def terms(x):
        r = x[idx] - y
        d1 = np.zeros(n)
        d2 = np.zeros(n)
        d1[idx] = -prec * r
        d2[idx] = -prec
        return float(-0.5 * prec * r @ r), d1, d2

    return terms


def test_gaussian_target_exact_in_one_step(rng):
    n = 8
    B = rng.normal(size=(n, n))
    Qd = B @ B.T + np.eye(n)
    idx = np.array([0, 2, 5])
    y = rng.normal(size=3)
    ga = find_mode(SpdMatrix(Qd), gaussian_terms(idx, y, 2.0, n), np.zeros(n))
    P = Qd.copy()
    P[idx, idx] += 2.0
    rhs = np.zeros(n)
    rhs[idx] = 2.0 * y
    assert ga.converged and ga.iterations == 1
    np.testing.assert_allclose(ga.mean, np.linalg.solve(P, rhs), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(ga.precision.toarray(), P, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(ga.c[idx], 2.0)


def survival_problem(seed=0, theta=0.0):
    d = sim.simulate_survival(8, 4, seed=seed)
    spec = extend_model(bundled.survival_model(d.times, d.covariate, d.group)).base
    th = np.array([theta])
    v = spec.hyper_values(th)
    Q = build_precision(spec, th)
    prior = lambda x: gaussian_quadratic(spec, x, v)
    return spec, Q, spec.term_evaluator(v), prior, spec.curvature_bound(v)


def test_survival_mode_gradient_confirmed_by_finite_differences():
    spec, Q, terms, prior, _ = survival_problem()
    ga = find_mode(Q, terms, spec.prior_mean(), prior=prior)
    assert ga.converged and ga.grad_norm < 1e-8

    def target(x):
        return -0.5 * prior(x)[0] + terms(x)[0]

    h = 1e-4
    for i in range(spec.structure.n_data, spec.n):
        e = np.zeros(spec.n)
        e[i] = h
        # the link precision makes eta directions stiff; check the effects
        assert abs((target(ga.mean + e) - target(ga.mean - e)) / (2 * h)) < 1e-5


def test_ascent_is_monotone_and_warm_start_agrees():
    spec, Q, terms, prior, bound = survival_problem(seed=3, theta=1.0)
    cold = find_mode(Q, terms, spec.prior_mean(), prior=prior, bound=bound)
    assert np.all(np.diff(cold.trace) >= 0)
    warm = find_mode(Q, terms, cold.mean + 0.1, prior=prior, bound=bound)
    np.testing.assert_allclose(warm.mean, cold.mean, atol=1e-8)


def test_damping_is_prior_inflation(rng):
    n = 6
    B = rng.normal(size=(n, n))
    Qd = B @ B.T + np.eye(n)
    c = rng.uniform(0, 1, n)
    g = rng.normal(size=n)
    delta = 0.3
    H = Qd + np.diag(c)
    damped = np.linalg.solve(H + delta * np.diag(np.diag(H)), g)
    inflated = Qd + delta * np.diag(np.diag(H))
    np.testing.assert_allclose(damped, np.linalg.solve(inflated + np.diag(c), g), rtol=1e-12)


def test_max_iterations():
    spec, Q, terms, prior, _ = survival_problem()
    with pytest.raises(MaxIterationsExceeded):
        find_mode(Q, terms, spec.prior_mean() + 3.0, ModeOptions(max_iter=1), prior=prior)


def test_non_finite_init():
    spec, Q, terms, prior, _ = survival_problem()
    x0 = spec.prior_mean()
    x0[0] = np.nan
    with pytest.raises(NonFiniteObjective):
        find_mode(Q, terms, x0, prior=prior)


def test_init_shape_checked():
    spec, Q, terms, prior, _ = survival_problem()
    with pytest.raises(ValueError):
        find_mode(Q, terms, np.zeros(spec.n + 1), prior=prior)


def test_fixed_coordinates_stay_put():
    spec, Q, terms, prior, _ = survival_problem()
    full = find_mode(Q, terms, spec.prior_mean(), prior=prior)
    i = spec.structure.block_slice("beta1").start
    fixed = np.zeros(spec.n, dtype=bool)
    fixed[i] = True
    x0 = full.mean.copy()
    x0[i] += 0.3
    cond = find_mode(Q, terms, x0, prior=prior, fixed=fixed)
    assert cond.mean[i] == x0[i]
    assert cond.objective < full.objective
