import time

import numpy as np
import pytest

from nginla import bundled, sim
from nginla.inla import InlaOptions, fit
from nginla.mcmc import ChainConfig, run_chain

SURVIVAL_SEED = 1
CHAIN_SEED = 3

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    mark = getattr(report, "criterion", None)
    if mark is not None:
        _criteria[mark] = report.outcome


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep.criterion = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for (num, title), outcome in sorted(_criteria.items()):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {num:>2} {status}  {title}")


@pytest.fixture(scope="session")
def survival_data():
    return sim.simulate_survival(n_groups=50, m=10, beta0=1.0, beta1=1.0, kappa=1.0, seed=SURVIVAL_SEED)


@pytest.fixture(scope="session")
def survival_spec(survival_data):
    d = survival_data
    return bundled.survival_model(d.times, d.covariate, d.group)


@pytest.fixture(scope="session")
def survival_fit(survival_spec):
    t0 = time.perf_counter()
    res = fit(survival_spec, InlaOptions(strategy="laplace", compare_strategies=True))
    res.wall_time = time.perf_counter() - t0
    return res


@pytest.fixture(scope="session")
def survival_chain(survival_spec):
    t0 = time.perf_counter()
    out = run_chain(survival_spec, ChainConfig(iterations=200_000, burn_in=20_000, thinning=10, seed=CHAIN_SEED))
    out.extra["wall_time"] = time.perf_counter() - t0
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
