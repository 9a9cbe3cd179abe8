import csv

import numpy as np
import pytest
from scipy.stats import norm

from nginla import bundled, sim
from nginla.errors import NonFiniteTarget
from nginla.mcmc import ChainConfig, ess, exact_log_joint, mcse_mean, run_chain, write_samples_csv
from nginla.model import EffectBlock, HyperPrior, LatentStructure, LikelihoodTerm, ModelSpec, log_joint

CFG = ChainConfig(iterations=40_000, burn_in=5_000, thinning=5, seed=11)


@pytest.fixture(scope="module")
def conjugate():
    """``y_j ~ N(beta, 1/2)``, ``beta ~ N(0, 1)``: posterior ``N(2 sum y / (2n + 1), 1 / (2n + 1))``."""
    y = np.array([0.3, 1.1, 0.8, 1.9, 0.4])
    st = LatentStructure(5, (EffectBlock("beta", "fixed", 1, 1.0),), np.ones((5, 1)))
    term = LikelihoodTerm("gaussian", st.link_map(), y, slots={"prec": 2.0})
    spec = ModelSpec(st, (term,), (HyperPrior("unused", "positive", "gamma", (2.0, 2.0)),))
    prec = 2.0 * len(y) + 1.0
    return spec, 2.0 * y.sum() / prec, 1.0 / np.sqrt(prec)


@pytest.fixture(scope="module")
def conjugate_chain(conjugate):
    return run_chain(conjugate[0], CFG)


def test_conjugate_mean(conjugate, conjugate_chain):
    _, m, s = conjugate
    x = conjugate_chain.column("beta")
    assert abs(x.mean() - m) < 3 * s / np.sqrt(ess(x))
    assert x.std() == pytest.approx(s, rel=0.05)


def test_discretized_stationary_frequency(conjugate, conjugate_chain):
    _, m, s = conjugate
    x = conjugate_chain.column("beta")
    for cut in (-0.5, 0.0, 0.8):
        state = (x < m + cut * s).astype(float)
        p = norm.cdf(cut)
        assert abs(state.mean() - p) < 3 * mcse_mean(state)


def test_acceptance_rates(conjugate_chain):
    assert np.all(conjugate_chain.acceptance > 0.1)
    assert np.all(conjugate_chain.acceptance < 0.6)


def test_sample_counts(conjugate_chain):
    assert conjugate_chain.latent.shape == (CFG.n_kept, 1)
    assert conjugate_chain.hyper.shape == (CFG.n_kept, 1)
    assert conjugate_chain.latent_names == ["beta"]


def test_seed_determinism(conjugate):
    cfg = ChainConfig(iterations=3_000, burn_in=500, thinning=2, seed=5)
    a = run_chain(conjugate[0], cfg)
    b = run_chain(conjugate[0], cfg)
    np.testing.assert_array_equal(a.latent, b.latent)
    np.testing.assert_array_equal(a.hyper, b.hyper)
    c = run_chain(conjugate[0], ChainConfig(iterations=3_000, burn_in=500, thinning=2, seed=6))
    assert not np.array_equal(a.latent, c.latent)


def test_config_validation():
    with pytest.raises(ValueError):
        ChainConfig(iterations=10, burn_in=10)
    with pytest.raises(ValueError):
        ChainConfig(thinning=0)
    with pytest.raises(ValueError):
        ChainConfig(proposal_scale=-1.0)


def test_non_finite_start():
    d = sim.simulate_survival(4, 3, seed=0)
    spec = bundled.survival_model(d.times, d.covariate, d.group)
    with pytest.raises(NonFiniteTarget):
        run_chain(spec, CFG, init_latent=np.full(6, 1e5))


def test_exact_joint_matches_model_joint(rng):
    """The sampler's target is the model's joint with the predictors tied exactly to the effects."""
    d = sim.simulate_tmm(sim.ContaminationCell(0.1, 0.1, 2.0), 0)
    spec = bundled.tmm_model(d.y, d.covariate, d.group)
    st = spec.structure
    for _ in range(5):
        u = rng.normal(0, 1, st.n_effects) + np.r_[np.zeros(27), 12.0, 1.0]
        theta = spec.initial_theta() + rng.normal(0, 0.3, 3)
        x = np.concatenate([st.design @ u, u])
        # at eta = A u the link density contributes its normalizing constant only
        link = 0.5 * st.n_data * np.log(st.link_precision / (2 * np.pi))
        assert exact_log_joint(spec, u, theta) == pytest.approx(log_joint(spec, x, theta) - link, abs=1e-8)


def test_ess_of_white_noise(rng):
    x = rng.normal(size=4000)
    assert 3000 < ess(x) <= 4000
    ar = np.zeros(4000)
    for i in range(1, 4000):
        ar[i] = 0.9 * ar[i - 1] + rng.normal()
    assert ess(ar) < 600


def test_samples_csv(tmp_path, conjugate, conjugate_chain):
    p = tmp_path / "s.csv"
    write_samples_csv(p, conjugate_chain, conjugate[0])
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["beta", "unused"]
    assert len(rows) == CFG.n_kept + 1
    assert float(rows[1][1]) > 0
