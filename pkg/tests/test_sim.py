import csv

import numpy as np
import pytest

from nginla import sim
from nginla.errors import ZeroDenominator


def test_survival_defaults():
    d = sim.simulate_survival()
    assert len(d) == 1000 and d.frailty.shape == (100,)
    assert np.all(d.times > 0)
    assert np.all(np.bincount(d.group) == 10)
    assert np.all(d.event == 1.0)
    assert d.beta == (1.0, 1.0) and d.kappa == 1.0


def test_survival_large_kappa():
    d = sim.simulate_survival(kappa=1e6, seed=3)
    assert np.std(d.frailty) < 0.01


def test_survival_determinism():
    a, b = sim.simulate_survival(seed=9), sim.simulate_survival(seed=9)
    np.testing.assert_array_equal(a.times, b.times)
    np.testing.assert_array_equal(a.covariate, b.covariate)
    assert not np.array_equal(a.times, sim.simulate_survival(seed=10).times)


def test_survival_moment():
    # with kappa large and beta1 = 0 the times are exponential with mean exp(-beta0)
    d = sim.simulate_survival(n_groups=4000, m=10, beta0=0.7, beta1=0.0, kappa=1e8, seed=1)
    se = d.times.std() / np.sqrt(len(d))
    assert abs(d.times.mean() - np.exp(-0.7)) < 3 * se


def test_survival_validation():
    with pytest.raises(ValueError):
        sim.simulate_survival(n_groups=0)
    with pytest.raises(ValueError):
        sim.simulate_survival(kappa=0.0)


def test_tmm_clean_cell():
    d = sim.simulate_tmm(sim.ContaminationCell(0.0, 0.0, 2.0), 0)
    assert len(d) == 108
    np.testing.assert_array_equal(np.unique(d.covariate), [8, 10, 12, 14])
    np.testing.assert_allclose(d.y, 12.0 + d.covariate + d.b[d.group] + d.e)


def test_tmm_unit_factor_is_uncontaminated():
    # f = 1 makes the wide component identical to the narrow one, draw for draw
    a = sim._mixture(np.random.default_rng(0), 10_000, 1.3, 0.5, 1.0)
    b = sim._mixture(np.random.default_rng(0), 10_000, 1.3, 0.0, 1.0)
    np.testing.assert_array_equal(a, b)


def test_tmm_inflation():
    e = np.concatenate([sim.simulate_tmm(sim.ContaminationCell(0.0, 1.0, 4.0), 0, r).e for r in range(100)])
    assert e.size == 10_800
    assert e.std() / np.sqrt(sim.TMM_SIGMA_E2) == pytest.approx(4.0, rel=0.03)
    v = np.concatenate([sim.simulate_tmm(sim.ContaminationCell(0.0, 1.0, 4.0, scale="var"), 0, r).e
                        for r in range(100)])
    assert v.std() / np.sqrt(sim.TMM_SIGMA_E2) == pytest.approx(2.0, rel=0.03)


def test_tmm_streams_are_per_replication():
    cell = sim.ContaminationCell(0.05, 0.1, 2.0)
    a = sim.simulate_tmm(cell, 4, 2)
    np.testing.assert_array_equal(a.y, sim.simulate_tmm(cell, 4, 2).y)
    assert not np.array_equal(a.y, sim.simulate_tmm(cell, 4, 3).y)


def test_cell_validation():
    with pytest.raises(ValueError):
        sim.ContaminationCell(1.5, 0.0, 2.0)
    with pytest.raises(ValueError):
        sim.ContaminationCell(0.0, 0.0, 0.5)
    with pytest.raises(ValueError):
        sim.ContaminationCell(0.0, 0.0, 2.0, scale="log")


def test_relative_efficiency():
    est = [1.0, 2.0, 3.0]
    assert sim.relative_efficiency(est, est, 2.5) == 1.0
    with pytest.raises(ZeroDenominator):
        sim.relative_efficiency(est, [2.0, 2.0, 2.0], 2.0)
    t = 5.0 + np.array([0.1, -0.2, 0.3, -0.1])
    g = 5.0 + 2.0 * (t - 5.0)
    assert sim.relative_efficiency(g, t, 5.0) == pytest.approx(4.0)
    with pytest.raises(ValueError):
        sim.relative_efficiency([1.0], [1.0, 2.0], 1.0)
    with pytest.raises(ValueError):
        sim.relative_efficiency([1.0], [2.0], 0.0)


def test_study_deterministic_and_order_free(tmp_path):
    cell = sim.ContaminationCell(0.1, 0.1, 2.0)
    a = sim.run_contamination_study([cell], reps=2, seed=3)
    b = sim.run_contamination_study([cell], reps=2, seed=3, threads=2)
    assert [r["efficiency"] for r in a.rows] == [r["efficiency"] for r in b.rows]
    assert len(a.rows) == 4 and a.failures[(0.1, 0.1, 2.0)] == 0
    p = tmp_path / "study.csv"
    a.write_csv(p)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["p_b", "p_e", "f", "parameter", "efficiency", "n_ok"]
    assert [r[3] for r in rows[1:]] == list(sim.PARAMETERS)
    with pytest.raises(ValueError):
        sim.run_contamination_study([cell], reps=1)


def test_full_design_shape():
    cells = sim.full_design()
    assert len(cells) == 32
    assert len({(c.p_b, c.p_e, c.f) for c in cells}) == 32
