"""Integrated nested Laplace approximation.

``log pi~(theta | y)`` is the log joint density divided by the Gaussian
approximation of ``pi(x | theta, y)``, both evaluated at the conditional mode.
The hyperparameter posterior is explored on a standardized grid around its
mode, latent marginals are computed per grid point (Gaussian or Laplace
flavor) and mixed with the grid weights.
"""
from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.interpolate import CubicSpline, LinearNDInterpolator, NearestNDInterpolator
from scipy.special import logsumexp
from scipy.stats import norm

from . import diagnostics
from .errors import DegenerateGrid, ExplorationFailed, NginlaError
from .gaussian_approx import GaussianApprox, ModeOptions, find_mode
from .marginals import PosteriorMarginal, interp_density
from .model import (
    ModelSpec,
    build_precision,
    gaussian_quadratic,
    log_det_precision,
    log_prior_theta,
)
from .near_gaussian import ExtendedModel, extend_model

__all__ = [
    "InlaOptions",
    "LaplaceTheta",
    "log_post_theta",
    "ThetaGrid",
    "explore_theta",
    "latent_marginal_gaussian",
    "latent_marginal_laplace",
    "integrate_marginals",
    "hyperparam_marginal",
    "InlaFit",
    "fit",
    "as_lgm",
]

STRATEGIES = ("gaussian", "laplace")


@dataclass(frozen=True)
class InlaOptions:
    strategy: str = "laplace"
    grid_step: float = 0.75
    log_drop: float = 2.5
    fd_step: float = 1e-3
    max_evals: int = 500
    max_grid_points: int = 2000
    laplace_offsets: tuple = tuple(0.5 * k for k in range(-7, 8))
    marginal_points: int = 101
    marginal_span: float = 5.0
    hyper_points: int = 41
    hyper_span: float = 4.5
    threads: int = 1
    components: tuple | None = None
    compare_strategies: bool = False
    skld_threshold: float = 0.05
    mode: ModeOptions = ModeOptions()

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not (self.grid_step > 0 and self.log_drop > 0):
            raise ValueError("grid step and log drop must be positive")


def as_lgm(model) -> ModelSpec:
    """The latent Gaussian model to run INLA on (rewriting non-Gaussian blocks if needed)."""
    if isinstance(model, ExtendedModel):
        return model.base
    if model.has_non_gaussian():
        return extend_model(model).base
    return model


class LaplaceTheta:
    """``theta -> (log pi~(theta | y), GaussianApprox)`` with a per-theta cache."""

    def __init__(self, model, mode_opts: ModeOptions = ModeOptions()):
        self.spec = as_lgm(model)
        self.mode_opts = mode_opts
        self._cache = {}
        self._lock = threading.Lock()
        self.n_evals = 0

    def __call__(self, theta, init=None):
        theta = np.asarray(theta, dtype=float).reshape(-1)
        key = theta.tobytes()
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        spec = self.spec
        values = spec.hyper_values(theta)
        Q = build_precision(spec, theta)
        x0 = spec.prior_mean() if init is None else init
        try:
            ga = find_mode(
                Q, spec.term_evaluator(values), x0, self.mode_opts,
                prior=lambda x: gaussian_quadratic(spec, x, values),
                bound=spec.curvature_bound(values),
            )
        except NginlaError as exc:
            exc.theta = theta.copy()
            raise
        value = (
            log_prior_theta(spec, theta)
            + 0.5 * log_det_precision(spec, values)
            + ga.objective
            - 0.5 * ga.log_det
        )
        out = (float(value), ga)
        with self._lock:
            self._cache[key] = out
            self.n_evals += 1
        return out


def log_post_theta(model, theta, cache: LaplaceTheta | None = None):
    """Unnormalized ``log pi~(theta | y)`` and the Gaussian approximation at ``theta``."""
    cache = cache if cache is not None else LaplaceTheta(model)
    return cache(theta)


@dataclass
class ThetaGrid:
    """Retained grid points with their log posterior and integration weights."""

    points: np.ndarray
    z: np.ndarray
    log_post: np.ndarray
    weights: np.ndarray
    mode: np.ndarray
    mode_log_post: float
    hessian: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    step: float
    approximations: list
    evaluated_z: np.ndarray
    evaluated_points: np.ndarray
    evaluated_log_post: np.ndarray
    mode_evals: int = 0

    def __len__(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def probs(self):
        """Normalized mixture weights ``exp(log_post) * weight``."""
        lw = self.log_post + np.log(self.weights)
        return np.exp(lw - logsumexp(lw))

    def to_theta(self, z):
        return self.mode + (np.atleast_2d(z) / np.sqrt(self.eigvals)) @ self.eigvecs.T

    def edge_mass(self):
        """Probability carried by points with a neighbor outside the retained set."""
        keys = {tuple(k) for k in np.rint(self.z / self.step).astype(int)}
        p = self.probs
        out = 0.0
        for k, pk in zip(np.rint(self.z / self.step).astype(int), p):
            for j in range(self.dim):
                for s in (-1, 1):
                    nb = k.copy()
                    nb[j] += s
                    if tuple(nb) not in keys:
                        out += pk
                        break
                else:
                    continue
                break
        return float(out)


def _map(fn, items, threads):
    if threads and threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def _fd_hessian(f, x, h):
    d = x.shape[0]
    f0 = f(x)
    H = np.empty((d, d))
    e = np.eye(d) * h
    fp = [f(x + e[i]) for i in range(d)]
    fm = [f(x - e[i]) for i in range(d)]
    for i in range(d):
        H[i, i] = (fp[i] - 2.0 * f0 + fm[i]) / (h * h)
        for j in range(i):
            v = (f(x + e[i] + e[j]) - f(x + e[i] - e[j]) - f(x - e[i] + e[j]) + f(x - e[i] - e[j])) / (4 * h * h)
            H[i, j] = H[j, i] = v
    return H


_PENALTY = 1e100  # finite, so simplex differences stay defined


def explore_theta(model, opts: InlaOptions = InlaOptions(), post: LaplaceTheta | None = None) -> ThetaGrid:
    """Locate the mode of ``log pi~(theta | y)`` and lay a standardized grid around it."""
    post = post if post is not None else LaplaceTheta(model, opts.mode)
    spec = post.spec
    d = spec.n_hyper
    if d == 0:
        raise DegenerateGrid("model has no hyperparameters")
    x0 = spec.initial_theta()
    state = {"evals": 0}

    # cold starts: with a multimodal pi(x | theta, y) a warm start can land on
    # another local mode and make the objective depend on the search path
    def neg(t):
        state["evals"] += 1
        try:
            return -post(t)[0]
        except NginlaError:
            return _PENALTY

    simplex = np.vstack([x0] + [x0 + np.eye(d)[i] for i in range(d)])
    res = optimize.minimize(
        neg, x0, method="Nelder-Mead",
        options={"maxfev": opts.max_evals, "xatol": 1e-5, "fatol": 1e-9, "initial_simplex": simplex},
    )
    if not res.success or not np.isfinite(res.fun):
        raise ExplorationFailed(f"mode search did not converge in {opts.max_evals} evaluations: {res.message}")
    mode = np.asarray(res.x, dtype=float)
    mode_val, mode_ga = post(mode)
    warm = mode_ga.mean

    def lp(t):
        return post(t, init=warm)[0]

    H = -_fd_hessian(lp, mode, opts.fd_step)
    H = 0.5 * (H + H.T)
    lam, V = np.linalg.eigh(H)
    if not np.all(lam > 0):
        raise ExplorationFailed(f"Hessian of log pi(theta|y) is not positive definite at the mode: {lam}")

    step = opts.grid_step
    to_theta = lambda k: mode + V @ (np.asarray(k, float) * step / np.sqrt(lam))

    evaluated = {}
    retained = []
    frontier = [tuple([0] * d)]
    seen = set(frontier)
    while frontier:
        if len(seen) > opts.max_grid_points:
            raise ExplorationFailed(f"grid exceeds {opts.max_grid_points} points")
        vals = _map(lambda k: post(to_theta(k), init=warm), frontier, opts.threads)
        nxt = []
        for k, (v, ga) in zip(frontier, vals):
            evaluated[k] = (v, ga)
            if mode_val - v < opts.log_drop:
                retained.append(k)
                for j in range(d):
                    for s in (-1, 1):
                        nb = list(k)
                        nb[j] += s
                        nb = tuple(nb)
                        if nb not in seen:
                            seen.add(nb)
                            nxt.append(nb)
        frontier = sorted(nxt)
    retained.sort()
    ev_keys = sorted(evaluated)
    z = np.array(retained, dtype=float) * step
    pts = np.array([to_theta(k) for k in retained])
    weight = step**d * float(np.prod(1.0 / np.sqrt(lam)))
    return ThetaGrid(
        points=pts,
        z=z,
        log_post=np.array([evaluated[k][0] for k in retained]),
        weights=np.full(len(retained), weight),
        mode=mode,
        mode_log_post=mode_val,
        hessian=H,
        eigvals=lam,
        eigvecs=V,
        step=step,
        approximations=[evaluated[k][1] for k in retained],
        evaluated_z=np.array(ev_keys, dtype=float) * step,
        evaluated_points=np.array([to_theta(k) for k in ev_keys]),
        evaluated_log_post=np.array([evaluated[k][0] for k in ev_keys]),
        mode_evals=state["evals"],
    )


def latent_marginal_gaussian(i, ga: GaussianApprox, n_points=101, span=5.0, name="") -> PosteriorMarginal:
    """Marginal of the Gaussian approximation, tabulated on ``mean +- span sd``."""
    mu = float(ga.mean[i])
    sd = float(np.sqrt(ga.variances()[i]))
    x = mu + sd * np.linspace(-span, span, n_points)
    return PosteriorMarginal(x, norm.pdf(x, mu, sd), name)


def latent_marginal_laplace(
    i, model, theta, ga: GaussianApprox, opts: InlaOptions = InlaOptions(), name="", warm=True
) -> PosteriorMarginal:
    """Laplace marginal: re-optimize the rest of the field with ``x_i`` held fixed.

    The log density at each offset is the conditional log joint minus half the
    log determinant of the conditional Gaussian precision; a cubic spline in
    units of the Gaussian sd interpolates between offsets and Gaussian tails
    extend it beyond them.
    """
    spec = as_lgm(model)
    values = spec.hyper_values(theta)
    Q = build_precision(spec, theta)
    terms = spec.term_evaluator(values)
    prior = lambda x: gaussian_quadratic(spec, x, values)
    bound = spec.curvature_bound(values)
    mu = float(ga.mean[i])
    e = np.zeros(ga.dim)
    e[i] = 1.0
    col = ga.factor.solve(e)
    var = float(col[i])
    sd = np.sqrt(var)
    fixed = np.zeros(ga.dim, dtype=bool)
    fixed[i] = True
    offsets = np.asarray(opts.laplace_offsets, dtype=float)
    logd = np.empty(offsets.shape[0])
    for k, o in enumerate(offsets):
        a = mu + o * sd
        if warm:
            init = ga.mean + (a - mu) * col / var
        else:
            init = spec.prior_mean()
        init[i] = a
        cga = find_mode(Q, terms, init, opts.mode, fixed=fixed, prior=prior, bound=bound)
        logd[k] = cga.objective - 0.5 * cga.log_det
    logd -= logd[np.argmin(np.abs(offsets))]
    spline = CubicSpline(offsets, logd)
    grid = np.linspace(-opts.marginal_span, opts.marginal_span, opts.marginal_points)
    out = spline(grid)
    lo, hi = offsets[0], offsets[-1]
    for edge, mask in ((lo, grid < lo), (hi, grid > hi)):
        if mask.any():
            dz = grid[mask] - edge
            out[mask] = spline(edge) + spline(edge, 1) * dz - 0.5 * dz * dz
    return PosteriorMarginal.from_log(mu + sd * grid, out, name)


def integrate_marginals(weights, marginals, name="") -> PosteriorMarginal:
    """Mixture ``sum_k w_k pi(x_i | theta_k, y)`` on the union of the abscissae.

    ``weights`` is a :class:`ThetaGrid` (its normalized probabilities are used)
    or a weight vector.
    """
    w = weights.probs if isinstance(weights, ThetaGrid) else np.asarray(weights, dtype=float)
    if len(marginals) != len(w):
        raise ValueError("one conditional marginal per grid point is required")
    w = w / np.sum(w)
    if len(marginals) == 1:
        m = marginals[0]
        return PosteriorMarginal(m.abscissae, m.densities, name or m.name)
    x = np.unique(np.concatenate([m.abscissae for m in marginals]))
    f = np.zeros_like(x)
    for wk, m in zip(w, marginals):
        f += wk * interp_density(m, x)
    return PosteriorMarginal(x, f, name)


def _quad_features(z):
    z = np.atleast_2d(z)
    n, d = z.shape
    cols = [np.ones(n)] + [z[:, j] for j in range(d)]
    for a in range(d):
        for b in range(a, d):
            cols.append(z[:, a] * z[:, b])
    return np.column_stack(cols)


def _interpolant(grid: ThetaGrid):
    """Quadratic fit of log pi~ in z plus an interpolated residual; ``None`` if degenerate."""
    z = grid.evaluated_z
    lp = grid.evaluated_log_post - grid.mode_log_post
    X = _quad_features(z)
    if X.shape[0] >= X.shape[1]:
        coef, _, rank, _ = np.linalg.lstsq(X, lp, rcond=None)
    else:
        rank = 0
    if rank < X.shape[1]:
        nn = NearestNDInterpolator(z, lp) if grid.dim > 1 else None
        if nn is None:
            order = np.argsort(z[:, 0])
            zs, ls = z[order, 0], lp[order]
            return lambda q: ls[np.clip(np.searchsorted(zs, np.atleast_2d(q)[:, 0]), 0, len(zs) - 1)]
        return lambda q: nn(np.atleast_2d(q))
    resid = lp - X @ coef
    if grid.dim == 1:
        order = np.argsort(z[:, 0])
        zs, rs = z[order, 0], resid[order]
        rfun = CubicSpline(zs, rs) if len(zs) >= 4 else (lambda q: np.interp(q, zs, rs))

        def r1(q):
            q = np.clip(np.atleast_2d(q)[:, 0], zs[0], zs[-1])
            return rfun(q)

        return lambda q: _quad_features(q) @ coef + r1(q)
    lin = LinearNDInterpolator(z, resid)
    near = NearestNDInterpolator(z, resid)

    def rd(q):
        q = np.atleast_2d(q)
        r = lin(q)
        bad = ~np.isfinite(r)
        if bad.any():
            r[bad] = near(q[bad])
        return r

    return lambda q: _quad_features(q) @ coef + rd(q)


def hyperparam_marginal(grid: ThetaGrid, j, spec: ModelSpec | None = None, opts: InlaOptions = InlaOptions(), name=""):
    """Posterior marginal of hyperparameter ``j`` (original scale if ``spec`` is given).

    The interpolated log posterior is evaluated on a lattice aligned with the
    internal hyperparameter axes, the other axes are summed out, and the result
    is mapped to the original scale with its Jacobian.
    """
    d = grid.dim
    if len(np.unique(np.round(grid.evaluated_points[:, j], 12))) < 3:
        raise DegenerateGrid(f"fewer than 3 distinct values along hyperparameter axis {j}")
    interp = _interpolant(grid)
    cov = np.linalg.inv(grid.hessian)
    sd = np.sqrt(np.diag(cov))
    axes = []
    for k in range(d):
        lo = min(grid.evaluated_points[:, k].min(), grid.mode[k] - opts.hyper_span * sd[k])
        hi = max(grid.evaluated_points[:, k].max(), grid.mode[k] + opts.hyper_span * sd[k])
        axes.append(np.linspace(lo, hi, opts.hyper_points))
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    zq = ((mesh - grid.mode) @ grid.eigvecs) * np.sqrt(grid.eigvals)
    logp = np.asarray(interp(zq), dtype=float).reshape([opts.hyper_points] * d)
    other = tuple(k for k in range(d) if k != j)
    logm = logsumexp(logp, axis=other) if other else logp
    u = axes[j]
    if spec is None:
        return PosteriorMarginal.from_log(u, logm, name)
    h = spec.hypers[j]
    v = np.asarray(h.to_original(u), dtype=float)
    return PosteriorMarginal.from_log(v, logm - h.log_jacobian(u), name or h.name)


@dataclass
class InlaFit:
    spec: ModelSpec
    grid: ThetaGrid
    strategy: str
    components: list
    names: list
    latent: dict
    hyper: dict
    report: "diagnostics.FitReport"
    latent_other: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def latent_mean(self):
        """Posterior means of every latent coordinate from the grid mixture."""
        p = self.grid.probs
        return np.sum([pk * ga.mean for pk, ga in zip(p, self.grid.approximations)], axis=0)

    def hyper_summary(self):
        return {k: m.summary() for k, m in self.hyper.items()}


def _conditional_marginals(spec, grid, comps, names, flavor, opts):
    out = {}
    for k, (theta, ga) in enumerate(zip(grid.points, grid.approximations)):
        if flavor == "gaussian":
            ga.variances()

        def one(ci):
            i, nm = ci
            if flavor == "gaussian":
                return latent_marginal_gaussian(i, ga, opts.marginal_points, opts.marginal_span, nm)
            return latent_marginal_laplace(i, spec, theta, ga, opts, nm)

        res = _map(one, list(zip(comps, names)), opts.threads)
        for nm, m in zip(names, res):
            out.setdefault(nm, []).append(m)
    return {nm: integrate_marginals(grid, ms, nm) for nm, ms in out.items()}


def fit(model, opts: InlaOptions = InlaOptions(), hyper_marginals=True) -> InlaFit:
    """Run the full approximation: grid, latent and hyperparameter marginals, diagnostics."""
    t0 = time.perf_counter()
    spec = as_lgm(model)
    post = LaplaceTheta(spec, opts.mode)
    grid = explore_theta(spec, opts, post)
    t1 = time.perf_counter()
    st = spec.structure
    comps = list(opts.components) if opts.components is not None else list(range(st.n_data, st.n))
    all_names = st.component_names()
    names = [all_names[i] for i in comps]
    latent = _conditional_marginals(spec, grid, comps, names, opts.strategy, opts)
    t2 = time.perf_counter()
    other = {}
    if opts.compare_strategies:
        flip = "gaussian" if opts.strategy == "laplace" else "laplace"
        other = _conditional_marginals(spec, grid, comps, names, flip, opts)
    t3 = time.perf_counter()
    hyper = {}
    if hyper_marginals:
        for j, h in enumerate(spec.hypers):
            hyper[h.name] = hyperparam_marginal(grid, j, spec, opts)
    t4 = time.perf_counter()
    timings = {"explore": t1 - t0, "latent": t2 - t1, "compare": t3 - t2, "hyper": t4 - t3}
    Qs = [build_precision(spec, th) for th in grid.points]
    report = diagnostics.fit_report(
        Qs, grid, st.n_data, latent, other, opts.skld_threshold, timings,
    )
    timings["total"] = time.perf_counter() - t0
    return InlaFit(spec, grid, opts.strategy, comps, names, latent, hyper, report, other, timings)
