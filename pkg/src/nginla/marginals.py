"""Tabulated univariate densities and their summaries."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.interpolate import PchipInterpolator

__all__ = ["PosteriorMarginal", "summarize", "interp_density", "QUANTILES"]

QUANTILES = (0.025, 0.5, 0.975)


def _quantile(x, cdf, p):
    k = int(np.searchsorted(cdf, p, side="left"))
    if k <= 0:
        return float(x[0])
    if k >= len(x):
        return float(x[-1])
    c0, c1 = cdf[k - 1], cdf[k]
    if c1 <= c0:
        return float(x[k])
    return float(x[k - 1] + (p - c0) / (c1 - c0) * (x[k] - x[k - 1]))


def summarize(m: "PosteriorMarginal"):
    """(mean, sd, q2.5, q50, q97.5) by trapezoid quadrature and inverse-CDF interpolation."""
    x, f = m.abscissae, m.densities
    mass = trapezoid(f, x)
    mean = trapezoid(x * f, x) / mass
    var = trapezoid((x - mean) ** 2 * f, x) / mass
    cdf = cumulative_trapezoid(f, x, initial=0.0) / mass
    qs = tuple(_quantile(x, cdf, p) for p in QUANTILES)
    return (float(mean), float(np.sqrt(max(var, 0.0)))) + qs


@dataclass(frozen=True)
class PosteriorMarginal:
    """Normalized density on strictly increasing abscissae."""

    abscissae: np.ndarray
    densities: np.ndarray
    name: str = ""

    def __post_init__(self):
        x = np.asarray(self.abscissae, dtype=float)
        f = np.asarray(self.densities, dtype=float)
        if x.ndim != 1 or x.shape != f.shape or x.shape[0] < 2:
            raise ValueError("abscissae and densities must be equal-length 1-D arrays")
        if not np.all(np.diff(x) > 0):
            raise ValueError("abscissae must be strictly increasing")
        if np.any(f < 0) or not np.all(np.isfinite(f)):
            raise ValueError("densities must be finite and nonnegative")
        mass = trapezoid(f, x)
        if not mass > 0:
            raise ValueError("density has zero mass")
        object.__setattr__(self, "abscissae", x)
        object.__setattr__(self, "densities", f / mass)
        object.__setattr__(self, "_summary", summarize(self))

    @classmethod
    def from_log(cls, x, logf, name=""):
        logf = np.asarray(logf, dtype=float)
        return cls(x, np.exp(logf - np.max(logf)), name)

    @property
    def mean(self):
        return self._summary[0]

    @property
    def sd(self):
        return self._summary[1]

    @property
    def quantiles(self):
        return self._summary[2:]

    def summary(self):
        return self._summary

    def integral(self):
        return float(trapezoid(self.densities, self.abscissae))

    def pdf(self, x):
        """Linear interpolation, zero outside the tabulated span."""
        return np.interp(x, self.abscissae, self.densities, left=0.0, right=0.0)


def interp_density(m: PosteriorMarginal, x):
    """Evaluate a tabulated density at ``x``: shape-preserving cubic in log density
    inside its span, zero outside. Unlike a spline it cannot overshoot where
    the log density has kinks, as mixtures of truncated tables do."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    inside = (x >= m.abscissae[0]) & (x <= m.abscissae[-1])
    f = m.densities
    if np.all(f > 0):
        out[inside] = np.exp(PchipInterpolator(m.abscissae, np.log(f))(x[inside]))
    else:
        out[inside] = np.interp(x[inside], m.abscissae, f)
    return out
