"""Self-checks of an approximation: effective parameters and symmetric KL divergence."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from .errors import DimensionMismatch, DisjointSupport
from .gaussian_approx import GaussianApprox
from .linalg import SpdMatrix
from .marginals import PosteriorMarginal, interp_density, summarize

__all__ = ["effective_params", "skld", "summarize", "FitReport", "fit_report", "DENSITY_FLOOR"]

DENSITY_FLOOR = 1e-12


def effective_params(Q_prior: SpdMatrix, ga: GaussianApprox) -> float:
    """``n - trace(Q_prior (Q*)^{-1})``, clamped at zero."""
    if Q_prior.dim != ga.dim:
        raise DimensionMismatch(f"prior has dimension {Q_prior.dim}, approximation {ga.dim}")
    S = ga.inverse()
    p = Q_prior.pattern
    cols = np.repeat(np.arange(p.n), np.diff(p.indptr))
    tr = float(np.sum(Q_prior.data * S[p.indices, cols]))
    return max(float(Q_prior.dim) - tr, 0.0)


def skld(p: PosteriorMarginal, q: PosteriorMarginal, floor=DENSITY_FLOOR) -> float:
    """``KL(p||q) + KL(q||p)`` by trapezoid quadrature on the union of both lattices."""
    lo = max(p.abscissae[0], q.abscissae[0])
    hi = min(p.abscissae[-1], q.abscissae[-1])
    if not lo < hi:
        raise DisjointSupport("the two densities have disjoint tabulated supports")
    x = np.union1d(p.abscissae, q.abscissae)
    fp = np.maximum(interp_density(p, x), floor)
    fq = np.maximum(interp_density(q, x), floor)
    fp /= trapezoid(fp, x)
    fq /= trapezoid(fq, x)
    d = float(trapezoid((fp - fq) * (np.log(fp) - np.log(fq)), x))
    return max(d, 0.0)


@dataclass
class FitReport:
    eeff: list
    eeff_mean: float
    n_data: int
    eeff_ok: bool
    skld: dict = field(default_factory=dict)
    skld_threshold: float = 0.05
    skld_small_fraction: float | None = None
    strategies_agree: bool | None = None
    timings: dict = field(default_factory=dict)
    grid_size: int = 0
    edge_mass: float = 0.0

    def to_dict(self):
        return asdict(self)


def fit_report(Q_priors, grid, n_data, latent, other, threshold, timings) -> FitReport:
    eeff = [effective_params(Q, ga) for Q, ga in zip(Q_priors, grid.approximations)]
    mean = float(np.dot(grid.probs, eeff))
    table = {}
    if other:
        for name, m in latent.items():
            table[name] = skld(m, other[name])
    frac = None
    agree = None
    if table:
        vals = np.array(list(table.values()))
        frac = float(np.mean(vals < threshold))
        agree = bool(np.all(vals < threshold))
    return FitReport(
        eeff=[float(e) for e in eeff],
        eeff_mean=mean,
        n_data=int(n_data),
        eeff_ok=bool(mean < n_data / 2.0),
        skld=table,
        skld_threshold=threshold,
        skld_small_fraction=frac,
        strategies_agree=agree,
        timings=dict(timings),
        grid_size=len(grid),
        edge_mass=grid.edge_mass(),
    )
