"""Seeded data generators and the contamination study driver."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import bundled
from .errors import NginlaError, ZeroDenominator
from .inla import InlaOptions, fit

__all__ = [
    "SurvivalDataset",
    "simulate_survival",
    "ContaminationCell",
    "TmmDataset",
    "simulate_tmm",
    "relative_efficiency",
    "run_contamination_study",
    "StudyResult",
    "TMM_DESIGN",
    "TMM_TRUTH",
    "PARAMETERS",
]

log = logging.getLogger(__name__)

TMM_GROUPS = 27
TMM_DESIGN = np.array([8.0, 10.0, 12.0, 14.0])
TMM_BETA = (12.0, 1.0)
TMM_SIGMA_B2 = 3.0
TMM_SIGMA_E2 = 2.0
PARAMETERS = ("beta0", "beta1", "tau_e", "tau_b")
TMM_TRUTH = {"beta0": TMM_BETA[0], "beta1": TMM_BETA[1], "tau_e": 1.0 / TMM_SIGMA_E2, "tau_b": 1.0 / TMM_SIGMA_B2}


@dataclass
class SurvivalDataset:
    times: np.ndarray
    covariate: np.ndarray
    group: np.ndarray
    unit: np.ndarray
    frailty: np.ndarray
    beta: tuple
    kappa: float
    event: np.ndarray = None

    def __post_init__(self):
        if self.event is None:
            self.event = np.ones_like(self.times)

    def __len__(self):
        return self.times.shape[0]


def simulate_survival(n_groups=100, m=10, beta0=1.0, beta1=1.0, kappa=1.0, seed=0) -> SurvivalDataset:
    """Exponential times with rate ``w_i exp(beta0 + beta1 z)``, ``z ~ U(0,1)``, ``w_i ~ Gamma(kappa, kappa)``."""
    if n_groups < 1 or m < 1:
        raise ValueError("need at least one group and one unit per group")
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    rng = np.random.default_rng(seed)
    n = n_groups * m
    z = rng.uniform(0.0, 1.0, n)
    w = rng.gamma(kappa, 1.0 / kappa, n_groups)
    rate = np.repeat(w, m) * np.exp(beta0 + beta1 * z)
    t = rng.exponential(1.0 / rate)
    return SurvivalDataset(
        times=t, covariate=z, group=np.repeat(np.arange(n_groups), m), unit=np.tile(np.arange(m), n_groups),
        frailty=w, beta=(float(beta0), float(beta1)), kappa=float(kappa),
    )


@dataclass(frozen=True)
class ContaminationCell:
    """Contamination probabilities of the random effects and errors, and the inflation factor."""

    p_b: float
    p_e: float
    f: float
    reps: int = 50
    seed: int = 0
    scale: str = "sd"

    def __post_init__(self):
        if not (0 <= self.p_b <= 1 and 0 <= self.p_e <= 1):
            raise ValueError("contamination probabilities must lie in [0, 1]")
        if not self.f >= 1:
            raise ValueError("contamination factor must be >= 1")
        if self.scale not in ("sd", "var"):
            raise ValueError("contamination scale must be 'sd' or 'var'")

    def code(self):
        return [int(round(1000 * self.p_b)), int(round(1000 * self.p_e)), int(round(1000 * self.f))]

    def inflation(self):
        """Multiplier applied to the standard deviation of contaminated draws."""
        return self.f if self.scale == "sd" else float(np.sqrt(self.f))


@dataclass
class TmmDataset:
    y: np.ndarray
    covariate: np.ndarray
    group: np.ndarray
    unit: np.ndarray
    b: np.ndarray
    e: np.ndarray
    cell: ContaminationCell

    def __len__(self):
        return self.y.shape[0]


def _stream(seed, cell: ContaminationCell, rep):
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + cell.code() + [int(rep)]))


def _mixture(rng, n, sd, p, k):
    wide = rng.random(n) < p
    return rng.standard_normal(n) * np.where(wide, k * sd, sd)


def simulate_tmm(cell: ContaminationCell, seed=None, rep=0) -> TmmDataset:
    """Mixed-model data ``y = X beta + b_i + e_ij`` with contaminated normal ``b`` and ``e``."""
    seed = cell.seed if seed is None else seed
    rng = _stream(seed, cell, rep)
    k = cell.inflation()
    b = _mixture(rng, TMM_GROUPS, np.sqrt(TMM_SIGMA_B2), cell.p_b, k)
    n = TMM_GROUPS * TMM_DESIGN.shape[0]
    e = _mixture(rng, n, np.sqrt(TMM_SIGMA_E2), cell.p_e, k)
    x = np.tile(TMM_DESIGN, TMM_GROUPS)
    g = np.repeat(np.arange(TMM_GROUPS), TMM_DESIGN.shape[0])
    y = TMM_BETA[0] + TMM_BETA[1] * x + b[g] + e
    return TmmDataset(y, x, g, np.tile(np.arange(TMM_DESIGN.shape[0]), TMM_GROUPS), b, e, cell)


def relative_efficiency(est_g, est_t, theta0) -> float:
    """Ratio of mean squared errors, Gaussian-model estimator over t-model estimator."""
    est_g = np.asarray(est_g, dtype=float)
    est_t = np.asarray(est_t, dtype=float)
    if est_g.shape != est_t.shape:
        raise ValueError("estimate vectors must have equal length")
    if theta0 == 0:
        raise ValueError("target value must be nonzero")
    den = float(np.sum((est_t - theta0) ** 2))
    if den == 0.0:
        raise ZeroDenominator("t-model estimates equal the target exactly")
    return float(np.sum((est_g - theta0) ** 2)) / den


_STUDY_OPTS = InlaOptions(strategy="gaussian", components=())


def estimates(spec, opts=_STUDY_OPTS):
    """Posterior means of beta0, beta1, tau_e, tau_b.

    The precisions are reported as 1/variance of the corresponding effect, so
    under a Student-t family ``tau * (nu - 2) / nu`` is averaged rather than the
    inverse squared scale. Means are taken over the integration grid.
    """
    res = fit(spec, opts, hyper_marginals=False)
    mean = res.latent_mean()
    st = res.spec.structure
    out = {
        "beta0": float(mean[st.block_slice("beta0")][0]),
        "beta1": float(mean[st.block_slice("beta1")][0]),
    }
    vals = [res.spec.hyper_values(t) for t in res.grid.points]
    for name in ("tau_e", "tau_b"):
        prec = np.array([v[name] * ((v["nu"] - 2.0) / v["nu"] if "nu" in v else 1.0) for v in vals])
        out[name] = float(res.grid.probs @ prec)
    return out


def _replicate(args):
    cell, seed, rep = args
    data = simulate_tmm(cell, seed, rep)
    try:
        g = estimates(bundled.gaussian_lgm(data.y, data.covariate, data.group))
        t = estimates(bundled.tmm_model(data.y, data.covariate, data.group))
    except (NginlaError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.warning("cell %s rep %d failed: %s", cell.code(), rep, exc)
        return None
    return g, t


@dataclass
class StudyResult:
    rows: list
    failures: dict = field(default_factory=dict)
    estimates: dict = field(default_factory=dict)

    HEADER = ("p_b", "p_e", "f", "parameter", "efficiency", "n_ok")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.HEADER)
            for r in self.rows:
                w.writerow([_fmt(r[k]) for k in self.HEADER])

    def efficiency(self, p_b, p_e, f, parameter):
        for r in self.rows:
            if (r["p_b"], r["p_e"], r["f"], r["parameter"]) == (p_b, p_e, f, parameter):
                return r["efficiency"]
        raise KeyError((p_b, p_e, f, parameter))


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run_contamination_study(cells, reps=50, seed=0, threads=1) -> StudyResult:
    """Fit the Gaussian and t mixed models to every replication of every cell.

    Replication ``r`` of a cell draws from its own stream keyed by
    ``(seed, cell, r)``, so results do not depend on execution order.
    Failed replications are dropped from both estimators and counted.
    """
    if reps < 2:
        raise ValueError("need at least two replications")
    rows = []
    failures = {}
    collected = {}
    for cell in cells:
        jobs = [(cell, seed, r) for r in range(reps)]
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                results = list(ex.map(_replicate, jobs))
        else:
            results = [_replicate(j) for j in jobs]
        ok = [r for r in results if r is not None]
        key = (cell.p_b, cell.p_e, cell.f)
        failures[key] = reps - len(ok)
        collected[key] = ok
        for p in PARAMETERS:
            eg = [g[p] for g, _ in ok]
            et = [t[p] for _, t in ok]
            eff = relative_efficiency(eg, et, TMM_TRUTH[p]) if ok else float("nan")
            rows.append({"p_b": cell.p_b, "p_e": cell.p_e, "f": cell.f, "parameter": p,
                         "efficiency": eff, "n_ok": len(ok)})
    return StudyResult(rows, failures, collected)


def full_design(reps=50, seed=0, scale="sd"):
    """All 32 cells: p_b, p_e in {0, .05, .1, .25} and f in {2, 4}."""
    levels = (0.0, 0.05, 0.1, 0.25)
    return [ContaminationCell(pb, pe, f, reps, seed, scale) for f in (2.0, 4.0) for pb in levels for pe in levels]
