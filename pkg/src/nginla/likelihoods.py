"""Vectorized log-density terms with analytic first and second derivatives.

Every function returns ``(value, d1, d2)`` arrays, elementwise in ``x``.
Student-t densities use the location/scale form with squared scale ``psi2`` and
``nu`` degrees of freedom; callers pass the precision ``1/psi2``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .errors import InvalidHyper

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class TermEval:
    """Value, first and second derivative of a log-density term."""

    value: np.ndarray | float
    d1: np.ndarray | float
    d2: np.ndarray | float


def _positive(name, v):
    if not np.all(np.asarray(v) > 0) or not np.all(np.isfinite(v)):
        raise InvalidHyper(f"{name} must be positive and finite, got {v}")


def exponential(eta, t, event=1.0):
    """Exponential survival time ``t`` with log-hazard ``eta``; ``event=0`` is right-censored."""
    h = t * np.exp(eta)
    return event * eta - h, event - h, -h


def gaussian(eta, y, prec):
    _positive("precision", prec)
    r = y - eta
    val = 0.5 * np.log(prec) - 0.5 * LOG_2PI - 0.5 * prec * r * r
    return val, prec * r, -prec * np.ones_like(r)


def _t_norm(prec, nu):
    return gammaln(0.5 * (nu + 1.0)) - gammaln(0.5 * nu) - 0.5 * np.log(np.pi * nu / prec)


def student_t(eta, y, prec, nu):
    """Location-t log density of ``y`` around ``eta`` (scale ``1/prec``, ``nu`` dof)."""
    _positive("precision", prec)
    _positive("degrees of freedom", nu)
    s = nu / prec
    r = y - eta
    q = s + r * r
    val = _t_norm(prec, nu) - 0.5 * (nu + 1.0) * np.log1p(r * r / s)
    d1 = (nu + 1.0) * r / q
    d2 = -(nu + 1.0) * (s - r * r) / (q * q)
    return val, d1, d2


def t_weight(eta, y, prec, nu):
    """Curvature of the quadratic minorizing the location-t log density at ``eta``.

    It is at least ``-d2`` everywhere, so Newton steps built from it never
    overshoot (the iteratively reweighted least squares step).
    """
    r = y - eta
    return (nu + 1.0) / (nu / prec + r * r)


# --- correction terms: log pi_NG(b) - log pi_G(b; mu_b, tau_b) ------------------


def _baseline(b, mu_b, tau_b):
    # minus the baseline Gaussian log density; a zero precision means a flat baseline
    if tau_b < 0 or not np.isfinite(tau_b):
        raise InvalidHyper(f"baseline precision must be >= 0, got {tau_b}")
    d = b - mu_b
    if tau_b == 0:
        z = np.zeros_like(d)
        return z, z, z
    val = 0.5 * tau_b * d * d - 0.5 * np.log(tau_b) + 0.5 * LOG_2PI
    return val, tau_b * d, np.full_like(d, tau_b)


def loggamma_density(b, shape):
    """Log density of ``log w`` for ``w ~ Gamma(shape, rate=shape)``."""
    _positive("log-gamma shape", shape)
    eb = np.exp(b)
    val = shape * np.log(shape) - gammaln(shape) + shape * (b - eb)
    return val, shape * (1.0 - eb), -shape * eb


def t_density(b, prec, nu):
    """Centered Student-t log density (precision ``1/psi2``)."""
    return student_t(b, 0.0, prec, nu)


def gaussian_density(b, mean, prec):
    _positive("precision", prec)
    d = b - mean
    return 0.5 * np.log(prec) - 0.5 * LOG_2PI - 0.5 * prec * d * d, -prec * d, np.full_like(d, -prec)


def correction(density, b, mu_b, tau_b):
    """Combine a non-Gaussian log density with the baseline Gaussian it replaces."""
    v, d1, d2 = density
    bv, b1, b2 = _baseline(np.asarray(b, dtype=float), mu_b, tau_b)
    return v + bv, d1 + b1, d2 + b2


def ct_loggamma(b, shape, mu_b, tau_b):
    b = np.asarray(b, dtype=float)
    return correction(loggamma_density(b, shape), b, mu_b, tau_b)


def ct_student_t(b, prec, nu, mu_b, tau_b):
    b = np.asarray(b, dtype=float)
    return correction(t_density(b, prec, nu), b, mu_b, tau_b)


def ct_gaussian(b, mean, prec, mu_b, tau_b):
    """Gaussian prior over the baseline; identically zero when the two coincide."""
    b = np.asarray(b, dtype=float)
    if mean == mu_b and prec == tau_b:
        z = np.zeros_like(b)
        return z, z, z
    return correction(gaussian_density(b, mean, prec), b, mu_b, tau_b)
