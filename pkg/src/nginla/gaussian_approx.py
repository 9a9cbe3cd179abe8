"""Gaussian approximation of ``exp(-1/2 x^T Q x + sum_i g_i(x_i))`` at its mode.

Newton iterations solve ``(Q + diag(c)) s = grad`` where ``c = -g''`` at the
current point. When the undamped system is not positive definite, or the full
step lowers the target, the step is damped as ``(Q' + delta diag(Q')) s = grad``
with ``delta`` adapted from the ratio of achieved to predicted improvement.
Damping the diagonal is the same as temporarily inflating the prior precision,
and ``delta`` returns to zero near the mode so the final iterations are plain
Newton.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import MaxIterationsExceeded, NonFiniteObjective, NotPositiveDefinite, ObjectiveDecrease
from .likelihoods import TermEval
from .linalg import CholFactor, SpdMatrix, cholesky

__all__ = [
    "taylor_coeffs",
    "TrustState",
    "TrustOptions",
    "trust_update",
    "ModeOptions",
    "GaussianApprox",
    "find_mode",
]


def taylor_coeffs(ev: TermEval, mu0):
    """Coefficients of the quadratic ``b x - c x^2 / 2`` matching ``g`` at ``mu0``."""
    c = -np.asarray(ev.d2, dtype=float)
    b = np.asarray(ev.d1, dtype=float) + c * mu0
    if c.ndim == 0:
        return float(b), float(c)
    return b, c


@dataclass(frozen=True)
class TrustOptions:
    low: float = 0.25
    high: float = 0.75
    factor: float = 4.0
    delta_min: float = 1e-3
    snap: float = 1e-6


@dataclass(frozen=True)
class TrustState:
    delta: float = 0.0
    accepted_ratio: float = float("nan")
    step_count: int = 0
    accepted: bool = False

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")


def trust_update(state: TrustState, rho: float, opts: TrustOptions = TrustOptions()) -> TrustState:
    """Adapt the damping from the improvement ratio; the step is accepted iff ``rho > 0``."""
    if math.isnan(rho):
        raise ValueError("improvement ratio is NaN")
    delta = state.delta
    if rho > opts.high:
        delta = delta / opts.factor
        if delta < opts.snap:
            delta = 0.0
    elif rho < opts.low:
        delta = max(opts.factor * delta, opts.delta_min)
    return TrustState(delta=delta, accepted_ratio=float(rho), step_count=state.step_count + 1, accepted=rho > 0)


@dataclass(frozen=True)
class ModeOptions:
    tol: float = 1e-8
    step_tol: float = 1e-10
    max_iter: int = 100
    trust_region: bool = True
    initial_delta: float = 0.0
    max_damping_retries: int = 60
    trust: TrustOptions = TrustOptions()


@dataclass
class GaussianApprox:
    """Mode, precision ``Q* = Q + diag(c*)`` and its factor."""

    mean: np.ndarray
    precision: SpdMatrix
    factor: CholFactor
    log_det: float
    converged: bool
    iterations: int
    c: np.ndarray
    objective: float
    grad_norm: float
    fixed: np.ndarray | None = None
    trace: list = field(default_factory=list)
    newton_failures: int = 0
    _variances: np.ndarray | None = field(default=None, repr=False)
    _inverse: np.ndarray | None = field(default=None, repr=False)

    @property
    def dim(self):
        return self.mean.shape[0]

    def inverse(self):
        if self._inverse is None:
            from .linalg import inverse

            self._inverse = inverse(self.factor)
        return self._inverse

    def variances(self):
        if self._variances is None:
            self._variances = np.diag(self.inverse()).copy()
        return self._variances

    def sd(self):
        return np.sqrt(self.variances())


def _default_prior(Q: SpdMatrix, mean):
    def prior(x):
        d = x - mean if mean is not None else x
        qd = Q.matvec(d)
        return float(d @ qd), qd

    return prior


def find_mode(
    Q: SpdMatrix,
    terms: Callable,
    init,
    opts: ModeOptions = ModeOptions(),
    fixed=None,
    prior: Callable | None = None,
    mean=None,
    bound: Callable | None = None,
) -> GaussianApprox:
    """Maximize ``-1/2 (x-mean)^T Q (x-mean) + terms(x)``.

    ``terms(x)`` returns ``(value, gradient, hessian_diagonal)`` over the whole
    field. ``fixed`` is a boolean mask of coordinates held at their ``init``
    values. ``prior(x)`` may supply ``((x-mean)^T Q (x-mean), Q (x-mean))`` in a
    numerically better form than a plain matrix product. ``bound(x)`` may
    supply curvatures ``c >= -d2`` of a global quadratic minorant of the
    terms; the resulting step always increases the target and is used when
    the Newton step does poorly far from the mode.
    """
    x = np.array(init, dtype=float)
    n = Q.dim
    if x.shape != (n,):
        raise ValueError(f"init has shape {x.shape}, expected ({n},)")
    if not np.all(np.isfinite(x)):
        raise NonFiniteObjective("initial point is not finite")
    if prior is None:
        prior = _default_prior(Q, mean)
    if fixed is not None:
        fixed = np.asarray(fixed, dtype=bool)
        if not fixed.any():
            fixed = None
    free = None if fixed is None else ~fixed

    def evaluate(z):
        with np.errstate(over="ignore", invalid="ignore"):
            quad, qd = prior(z)
            val, d1, d2 = terms(z)
        f = -0.5 * quad + val
        g = d1 - qd
        if free is not None:
            g = np.where(free, g, 0.0)
        return f, g, d2

    def hessian(d2):
        H = Q.add_diagonal(-d2)
        return H if fixed is None else H.pinned(fixed)

    def clipped(d2):
        # drop negative curvature of the terms; Q alone is positive definite
        H = Q.add_diagonal(np.maximum(-d2, 0.0))
        return H if fixed is None else H.pinned(fixed)

    f, g, d2 = evaluate(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NonFiniteObjective(f"target is not finite at the initial point (f={f})")
    state = TrustState(delta=float(opts.initial_delta))
    trace = [f]
    failures = 0
    steps = 0
    for _ in range(opts.max_iter + 1):
        H = hessian(d2)
        gnorm = float(np.max(np.abs(g))) if n else 0.0
        # convergence: needs the undamped factor at the current point
        if gnorm < opts.tol:
            try:
                F = cholesky(H)
                s = F.solve(g)
                if float(np.max(np.abs(s))) < opts.step_tol * (1.0 + float(np.max(np.abs(x)))):
                    return GaussianApprox(
                        mean=x, precision=H, factor=F, log_det=F.logdet(), converged=True,
                        iterations=steps, c=-d2, objective=f, grad_norm=gnorm, fixed=fixed,
                        trace=trace, newton_failures=failures,
                    )
            except NotPositiveDefinite:
                pass
        if steps >= opts.max_iter:
            break
        # one (possibly damped) step
        base = H
        mm_tried = bound is None
        for _retry in range(opts.max_damping_retries):
            delta = state.delta if opts.trust_region else 0.0
            M = base if delta == 0.0 else base.add_diagonal(delta * np.abs(base.diagonal()))
            try:
                F = cholesky(M)
            except NotPositiveDefinite:
                if delta == 0.0:
                    failures += 1
                if not opts.trust_region:
                    raise
                if not mm_tried:
                    mm_tried = True
                    out = _minorant_step(x, f, g, bound, Q, fixed, evaluate)
                    if out is not None:
                        x, f, g, d2 = out
                        trace.append(f)
                        break
                if base is H:
                    base = clipped(d2)
                else:
                    state = replace(state, delta=max(opts.trust.factor * state.delta, opts.trust.delta_min))
                continue
            s = F.solve(g)
            x_new = x + s
            f_new, g_new, d2_new = evaluate(x_new)
            pred = float(g @ s) - 0.5 * float(s @ H.matvec(s))
            actual = f_new - f if np.isfinite(f_new) else -np.inf
            resolution = 1e-13 * (1.0 + abs(f))
            if not np.isfinite(f_new):
                rho = -1.0
            elif abs(pred) <= resolution and actual >= -resolution:
                rho = 1.0
            elif pred <= 0.0:
                rho = 1.0 if actual > 0 else -1.0
            else:
                rho = actual / pred
            if rho <= 0 and delta == 0.0:
                failures += 1
                if not opts.trust_region:
                    raise ObjectiveDecrease(f"Newton step changed the target by {actual:.3e}")
            if opts.trust_region and rho < opts.trust.low and not mm_tried:
                mm_tried = True
                out = _minorant_step(x, f, g, bound, Q, fixed, evaluate)
                if out is not None and out[1] - f > max(actual, 0.0):
                    x, f, g, d2 = out
                    trace.append(f)
                    break
            state = trust_update(state, rho, opts.trust) if opts.trust_region else state
            if rho > 0:
                x, f, g, d2 = x_new, f_new, g_new, d2_new
                trace.append(f)
                break
        else:
            raise NotPositiveDefinite("damping failed to produce a positive definite system")
        steps += 1
    raise MaxIterationsExceeded(
        f"no convergence after {opts.max_iter} iterations (gradient max-norm {float(np.max(np.abs(g))):.3e})"
    )


def _minorant_step(x, f, g, bound, Q, fixed, evaluate):
    """Maximize the quadratic minorant at ``x``; ``None`` if it fails to improve."""
    with np.errstate(over="ignore", invalid="ignore"):
        c = bound(x)
    if not np.all(np.isfinite(c)):
        return None
    M = Q.add_diagonal(c)
    if fixed is not None:
        M = M.pinned(fixed)
    try:
        F = cholesky(M)
    except NotPositiveDefinite:
        return None
    x_new = x + F.solve(g)
    f_new, g_new, d2_new = evaluate(x_new)
    if not np.isfinite(f_new) or not f_new > f:
        return None
    return x_new, f_new, g_new, d2_new
