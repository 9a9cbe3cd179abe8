"""Model specification: latent blocks, likelihood terms, hyperparameter priors.

The latent vector is laid out as ``x = (eta, u)`` where ``eta`` holds one
linear predictor per observation and ``u`` concatenates the effect blocks in
declaration order. Each predictor is tied to its effects by a Gaussian identity
``eta ~ N(A u, 1/link_precision)``, so the prior precision is

    Q(theta) = link_precision * [[I, -A], [-A^T, A^T A]] + diag(0, P(theta))

with ``P(theta)`` diagonal (fixed effects and iid blocks). Only the diagonal
depends on ``theta``, so every ``Q(theta)`` shares one sparsity pattern.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy import stats
from scipy.special import gammaln

from . import likelihoods as lk
from .errors import DimensionMismatch, InvalidHyper, UnsupportedStructure
from .likelihoods import LOG_2PI, TermEval
from .linalg import SpdMatrix

__all__ = [
    "HyperPrior",
    "NonGaussianPrior",
    "EffectBlock",
    "LatentStructure",
    "LikelihoodTerm",
    "ModelSpec",
    "build_precision",
    "log_lik_eval",
    "log_prior_theta",
    "log_joint",
    "DEFAULT_LINK_PRECISION",
]

DEFAULT_LINK_PRECISION = 1e3

SUPPORTS = ("positive", "real", "dof")


@dataclass(frozen=True)
class HyperPrior:
    """Prior for one hyperparameter and its map to the unconstrained scale.

    ``support`` selects the internal transform: ``log`` for positive values,
    identity for real ones and ``log(v - shift)`` for degrees of freedom.
    Gamma priors are densities on the original scale (the log-Jacobian is added);
    Gaussian priors are densities on the internal scale.
    """

    name: str
    support: str = "positive"
    family: str = "gamma"
    params: tuple[float, float] = (1.0, 1.0)
    shift: float = 5.0
    initial: float | None = None

    def __post_init__(self):
        if self.support not in SUPPORTS:
            raise InvalidHyper(f"{self.name}: unknown support {self.support!r}")
        a, b = self.params
        if self.family == "gamma":
            if not (a > 0 and b > 0):
                raise InvalidHyper(f"{self.name}: gamma prior needs shape, rate > 0")
            if self.support == "real":
                raise InvalidHyper(f"{self.name}: gamma prior needs a positive support")
        elif self.family == "gaussian":
            if not b > 0:
                raise InvalidHyper(f"{self.name}: gaussian prior needs variance > 0")
        else:
            raise InvalidHyper(f"{self.name}: unknown prior family {self.family!r}")

    @property
    def offset(self):
        return self.shift if self.support == "dof" else 0.0

    def to_original(self, u):
        if self.support == "real":
            return u
        return self.offset + np.exp(u)

    def to_internal(self, v):
        if self.support == "real":
            return v
        if np.any(np.asarray(v) <= self.offset):
            raise InvalidHyper(f"{self.name}={v} outside its support")
        return np.log(np.asarray(v, dtype=float) - self.offset)

    def log_jacobian(self, u):
        """log |d original / d internal|."""
        return np.zeros_like(u) if self.support == "real" else u

    def log_density(self, u):
        """Log prior density with respect to the internal coordinate."""
        a, b = self.params
        if self.family == "gaussian":
            d = u - a
            return -0.5 * np.log(2.0 * np.pi * b) - 0.5 * d * d / b
        v = self.to_original(u) - self.offset
        return a * np.log(b) - gammaln(a) + (a - 1.0) * np.log(v) - b * v + self.log_jacobian(u)

    def median_internal(self):
        if self.initial is not None:
            return float(self.initial)
        a, b = self.params
        if self.family == "gaussian":
            return float(a)
        return float(np.log(stats.gamma.ppf(0.5, a, scale=1.0 / b)))


@dataclass(frozen=True)
class NonGaussianPrior:
    """Independent non-Gaussian prior on the components of an iid block.

    ``kind``: ``loggamma`` (slot ``shape``), ``student_t`` (slots ``prec``, ``dof``)
    or ``gaussian`` (slot ``prec`` plus a constant ``mean``). Slots map to a
    hyperparameter name or a constant.
    """

    kind: str
    slots: Mapping[str, str | float] = field(default_factory=dict)
    mean: float = 0.0
    independent: bool = True

    REQUIRED = {"loggamma": ("shape",), "student_t": ("prec", "dof"), "gaussian": ("prec",)}

    def __post_init__(self):
        if self.kind not in self.REQUIRED:
            raise InvalidHyper(f"unknown non-Gaussian prior {self.kind!r}")
        missing = [s for s in self.REQUIRED[self.kind] if s not in self.slots]
        if missing:
            raise InvalidHyper(f"{self.kind} prior is missing slots {missing}")
        if not self.independent:
            raise UnsupportedStructure("non-Gaussian components must be mutually independent")

    def log_density(self, b, values):
        """(value, d1, d2) of the log prior, elementwise."""
        p = {k: _resolve(v, values) for k, v in self.slots.items()}
        if self.kind == "loggamma":
            return lk.loggamma_density(b, p["shape"])
        if self.kind == "student_t":
            return lk.t_density(b, p["prec"], p["dof"])
        return lk.gaussian_density(b, self.mean, p["prec"])


@dataclass(frozen=True)
class EffectBlock:
    """A block of effects: ``fixed`` (constant precision) or ``iid``.

    ``precision`` is a constant or the name of a hyperparameter. A block with a
    ``ng_prior`` has that non-Gaussian prior instead of ``N(mean, 1/precision)``.
    """

    name: str
    kind: str
    size: int
    precision: float | str | None
    mean: float = 0.0
    ng_prior: NonGaussianPrior | None = None

    def __post_init__(self):
        if self.kind not in ("fixed", "iid"):
            raise UnsupportedStructure(f"block {self.name}: unknown kind {self.kind!r}")
        if self.size < 1:
            raise DimensionMismatch(f"block {self.name}: size must be >= 1")
        if self.precision is None and self.ng_prior is None:
            raise InvalidHyper(f"block {self.name}: a Gaussian block needs a precision")
        if isinstance(self.precision, (int, float)) and not self.precision > 0:
            raise InvalidHyper(f"block {self.name}: precision must be > 0")
        if self.ng_prior is not None and self.kind != "iid":
            raise UnsupportedStructure(f"block {self.name}: non-Gaussian priors need an iid block")


@dataclass
class LatentStructure:
    """Predictors plus effect blocks; ``design`` maps effects to predictors (n_data x n_effects)."""

    n_data: int
    blocks: tuple[EffectBlock, ...]
    design: sp.csr_matrix
    link_precision: float = DEFAULT_LINK_PRECISION

    def __post_init__(self):
        self.blocks = tuple(self.blocks)
        self.design = sp.csr_matrix(self.design, dtype=float)
        self.design.sort_indices()
        n_u = sum(b.size for b in self.blocks)
        if self.design.shape != (self.n_data, n_u):
            raise DimensionMismatch(f"design is {self.design.shape}, expected ({self.n_data}, {n_u})")
        if not self.link_precision > 0:
            raise InvalidHyper("link precision must be > 0")
        starts = np.cumsum([0] + [b.size for b in self.blocks])
        self._starts = starts
        self._template = None
        A = self.design
        self._ld_data = A.data.astype(np.longdouble)
        self._rows = np.flatnonzero(np.diff(A.indptr) > 0)
        self._row_starts = A.indptr[:-1][self._rows]

    @property
    def n_effects(self):
        return int(self._starts[-1])

    @property
    def n(self):
        return self.n_data + self.n_effects

    def block_slice(self, name_or_index):
        """Slice of the latent vector ``x`` covering one block."""
        k = self.block_index(name_or_index)
        return slice(self.n_data + int(self._starts[k]), self.n_data + int(self._starts[k + 1]))

    def block_index(self, name_or_index):
        if isinstance(name_or_index, (int, np.integer)):
            return int(name_or_index)
        for k, b in enumerate(self.blocks):
            if b.name == name_or_index:
                return k
        raise KeyError(name_or_index)

    def link_residual(self, eta, u):
        """``eta - A u`` accumulated in extended precision.

        At the mode the residual is tiny next to ``eta`` and is multiplied by
        the link precision, so plain double rounding would put a floor under the
        attainable gradient norm.
        """
        A = self.design
        prods = self._ld_data * u[A.indices].astype(np.longdouble)
        au = np.zeros(self.n_data, dtype=np.longdouble)
        if prods.size:
            au[self._rows] = np.add.reduceat(prods, self._row_starts)
        return (eta.astype(np.longdouble) - au).astype(float)

    def link_map(self):
        """Latent index of each observation's predictor."""
        return np.arange(self.n_data)

    def component_names(self):
        names = [f"eta[{j}]" for j in range(self.n_data)]
        for b in self.blocks:
            names += [b.name] if b.size == 1 else [f"{b.name}[{i}]" for i in range(b.size)]
        return names

    def template(self):
        """Link part of the precision; the effect diagonal is filled per theta."""
        if self._template is None:
            A = self.design
            k = self.link_precision
            nd, nu = A.shape
            top = sp.hstack([sp.identity(nd), -A])
            bot = sp.hstack([-A.T, A.T @ A])
            self._template = SpdMatrix(k * sp.vstack([top, bot]).tocsc(), check=False)
        return self._template


@dataclass(frozen=True)
class LikelihoodTerm:
    """A group of conditionally independent terms of one family.

    ``index`` holds the latent coordinate each term reads; ``y``/``event`` the
    data. ``slots`` map family parameters to hyperparameter names or constants.
    Correction terms carry the non-Gaussian prior and the baseline they undo.
    """

    family: str
    index: np.ndarray
    y: np.ndarray
    slots: Mapping[str, str | float] = field(default_factory=dict)
    event: np.ndarray | None = None
    ng_prior: NonGaussianPrior | None = None
    baseline: tuple[float, float] = (0.0, 0.0)

    REQUIRED = {"exponential": (), "gaussian": ("prec",), "student_t": ("prec", "dof"), "correction": ()}

    def __post_init__(self):
        if self.family not in self.REQUIRED:
            raise InvalidHyper(f"unknown likelihood family {self.family!r}")
        object.__setattr__(self, "index", np.asarray(self.index, dtype=np.int64))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        if self.index.shape != self.y.shape:
            raise DimensionMismatch("index and data lengths differ")
        if not np.all(np.isfinite(self.y)):
            raise InvalidHyper("likelihood data must be finite")
        if self.event is not None:
            object.__setattr__(self, "event", np.asarray(self.event, dtype=float))
        missing = [s for s in self.REQUIRED[self.family] if s not in self.slots]
        if missing:
            raise InvalidHyper(f"{self.family} terms are missing slots {missing}")
        if self.family == "correction" and self.ng_prior is None:
            raise InvalidHyper("correction terms need a non-Gaussian prior")

    def __len__(self):
        return self.index.shape[0]

    def hyper_names(self):
        names = [v for v in self.slots.values() if isinstance(v, str)]
        if self.ng_prior is not None:
            names += [v for v in self.ng_prior.slots.values() if isinstance(v, str)]
        return names


def _resolve(slot, values):
    if isinstance(slot, str):
        return values[slot]
    return float(slot)


@dataclass
class ModelSpec:
    """Complete hierarchical model: latent structure, likelihood terms, hyper priors."""

    structure: LatentStructure
    terms: tuple[LikelihoodTerm, ...]
    hypers: tuple[HyperPrior, ...]
    name: str = ""

    def __post_init__(self):
        self.terms = tuple(self.terms)
        self.hypers = tuple(self.hypers)
        names = [h.name for h in self.hypers]
        if len(set(names)) != len(names):
            raise InvalidHyper(f"duplicate hyperparameter names in {names}")
        used = set()
        for t in self.terms:
            used.update(t.hyper_names())
            if len(t) and (t.index.min() < 0 or t.index.max() >= self.structure.n):
                raise DimensionMismatch(f"{t.family} term indexes outside the latent field")
        for b in self.structure.blocks:
            if isinstance(b.precision, str):
                used.add(b.precision)
            if b.ng_prior is not None:
                used.update(v for v in b.ng_prior.slots.values() if isinstance(v, str))
        unknown = used - set(names)
        if unknown:
            raise InvalidHyper(f"undeclared hyperparameters {sorted(unknown)}")

    @property
    def n(self):
        return self.structure.n

    @property
    def n_hyper(self):
        return len(self.hypers)

    @property
    def hyper_names(self):
        return [h.name for h in self.hypers]

    def has_non_gaussian(self):
        return any(b.ng_prior is not None for b in self.structure.blocks)

    def hyper_values(self, theta):
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.shape[0] != self.n_hyper:
            raise DimensionMismatch(f"expected {self.n_hyper} hyperparameters, got {theta.shape[0]}")
        if not np.all(np.isfinite(theta)):
            raise InvalidHyper(f"non-finite hyperparameters {theta}")
        out = {}
        for h, u in zip(self.hypers, theta):
            v = float(h.to_original(u))
            if not np.isfinite(v) or (h.support != "real" and v <= h.offset):
                raise InvalidHyper(f"{h.name}={v} outside its support")
            out[h.name] = v
        return out

    def initial_theta(self):
        return np.array([h.median_internal() for h in self.hypers])

    def block_precisions(self, values):
        """Per-block prior precision (non-Gaussian blocks are skipped: ``nan``)."""
        out = []
        for b in self.structure.blocks:
            if b.ng_prior is not None:
                out.append(np.nan)
                continue
            p = _resolve(b.precision, values)
            if not p > 0 or not np.isfinite(p):
                raise InvalidHyper(f"block {b.name}: precision {p} is not positive")
            out.append(p)
        return np.array(out)

    def prior_mean(self):
        """Mean of the Gaussian prior, ``(A m, m)``."""
        m = np.concatenate([np.full(b.size, b.mean, dtype=float) for b in self.structure.blocks])
        return np.concatenate([self.structure.design @ m, m])

    def term_evaluator(self, values, terms=None):
        """Callable ``x -> (sum of values, gradient, Hessian diagonal)`` over the whole field."""
        terms = self.terms if terms is None else terms
        params = [{k: _resolve(v, values) for k, v in t.slots.items()} for t in terms]
        n = self.n

        def evaluate(x):
            total = 0.0
            d1 = np.zeros(n)
            d2 = np.zeros(n)
            for t, p in zip(terms, params):
                v, g1, g2 = _eval_family(t, x[t.index], p, values)
                total += float(np.sum(v))
                np.add.at(d1, t.index, g1)
                np.add.at(d2, t.index, g2)
            return total, d1, d2

        return evaluate


    def curvature_bound(self, values, terms=None):
        """Callable ``x -> c`` with ``c >= -d2`` elementwise and a global quadratic minorant.

        Only Student-t pieces differ from the exact negative curvature.
        """
        terms = self.terms if terms is None else terms
        params = [{k: _resolve(v, values) for k, v in t.slots.items()} for t in terms]
        n = self.n

        def bound(x):
            c = np.zeros(n)
            for t, p in zip(terms, params):
                np.add.at(c, t.index, _family_bound(t, x[t.index], p, values))
            return c

        return bound


def _family_bound(term, x, p, values):
    if term.family == "student_t":
        return lk.t_weight(x, term.y, p["prec"], p["dof"])
    if term.family == "correction" and term.ng_prior.kind == "student_t":
        q = {k: _resolve(v, values) for k, v in term.ng_prior.slots.items()}
        return lk.t_weight(x, 0.0, q["prec"], q["dof"]) - term.baseline[1]
    return -_eval_family(term, x, p, values)[2]


def _eval_family(term, x, p, values):
    f = term.family
    if f == "exponential":
        ev = 1.0 if term.event is None else term.event
        return lk.exponential(x, term.y, ev)
    if f == "gaussian":
        return lk.gaussian(x, term.y, p["prec"])
    if f == "student_t":
        return lk.student_t(x, term.y, p["prec"], p["dof"])
    ng = term.ng_prior
    mu_b, tau_b = term.baseline
    q = {k: _resolve(v, values) for k, v in ng.slots.items()}
    if ng.kind == "loggamma":
        return lk.ct_loggamma(x, q["shape"], mu_b, tau_b)
    if ng.kind == "student_t":
        return lk.ct_student_t(x, q["prec"], q["dof"], mu_b, tau_b)
    return lk.ct_gaussian(x, ng.mean, q["prec"], mu_b, tau_b)


def build_precision(spec: ModelSpec, theta) -> SpdMatrix:
    """Prior precision ``Q(theta)`` of the latent field.

    Non-Gaussian blocks have no Gaussian prior; reformulate the model first.
    """
    if spec.has_non_gaussian():
        raise UnsupportedStructure("model has non-Gaussian latent blocks; extend it first")
    values = spec.hyper_values(theta)
    st = spec.structure
    prec = spec.block_precisions(values)
    diag = np.concatenate([np.zeros(st.n_data)] + [np.full(b.size, p) for b, p in zip(st.blocks, prec)])
    return st.template().add_diagonal(diag)


def log_det_precision(spec: ModelSpec, values) -> float:
    """``log det Q(theta)``: the link part contributes ``n_data * log(link_precision)``."""
    st = spec.structure
    prec = spec.block_precisions(values)
    return st.n_data * math.log(st.link_precision) + float(
        sum(b.size * math.log(p) for b, p in zip(st.blocks, prec))
    )


def gaussian_quadratic(spec: ModelSpec, x, values):
    """``(x - mu)^T Q (x - mu)`` evaluated blockwise, and its gradient ``Q (x - mu)``.

    Working with the residual ``eta - A u`` keeps the large link precision from
    amplifying rounding in ``Q x``.
    """
    st = spec.structure
    nd = st.n_data
    eta, u = x[:nd], x[nd:]
    r = st.link_residual(eta, u)
    k = st.link_precision
    quad = k * float(r @ r)
    grad = np.empty_like(x)
    grad[:nd] = k * r
    gu = -k * (st.design.T @ r)
    prec = spec.block_precisions(values)
    for j, b in enumerate(st.blocks):
        s = slice(int(st._starts[j]), int(st._starts[j + 1]))
        d = u[s] - b.mean
        if b.ng_prior is None:
            quad += prec[j] * float(d @ d)
            gu[s] += prec[j] * d
    grad[nd:] = gu
    return quad, grad


def log_gaussian_prior(spec: ModelSpec, x, values) -> float:
    """``log N(x; mu, Q(theta)^{-1})`` for a model without non-Gaussian blocks."""
    quad, _ = gaussian_quadratic(spec, x, values)
    return 0.5 * log_det_precision(spec, values) - 0.5 * spec.n * LOG_2PI - 0.5 * quad


def log_lik_eval(term: LikelihoodTerm, x, theta_or_values, spec: ModelSpec | None = None) -> TermEval:
    """Elementwise (value, d1, d2) of ``term`` at latent values ``x``.

    ``x`` is aligned with the term's entries (or a scalar); hyperparameters are a
    name-to-value mapping, or an internal vector together with ``spec``.
    """
    if spec is not None:
        values = spec.hyper_values(theta_or_values)
    else:
        values = dict(theta_or_values)
    p = {k: _resolve(v, values) for k, v in term.slots.items()}
    x = np.broadcast_to(np.asarray(x, dtype=float), term.y.shape).copy()
    v, d1, d2 = _eval_family(term, x, p, values)
    return TermEval(np.asarray(v), np.asarray(d1), np.asarray(d2))


def log_prior_theta(spec: ModelSpec, theta) -> float:
    """Log prior of the internal hyperparameter vector (Jacobians included)."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.shape[0] != spec.n_hyper:
        raise DimensionMismatch(f"expected {spec.n_hyper} hyperparameters, got {theta.shape[0]}")
    return float(sum(h.log_density(u) for h, u in zip(spec.hypers, theta)))


def log_joint(spec: ModelSpec, x, theta) -> float:
    """Unnormalized log ``pi(x, theta, y)`` with every normalizing constant kept.

    Gaussian blocks use their Gaussian prior, non-Gaussian blocks their own
    density, and the predictors the link identity ``N(eta; A u, 1/link_precision)``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.n,):
        raise DimensionMismatch(f"latent vector has shape {x.shape}, expected ({spec.n},)")
    values = spec.hyper_values(theta)
    st = spec.structure
    quad, _ = gaussian_quadratic(spec, x, values)
    prec = spec.block_precisions(values)
    n_gauss = st.n_data
    logdet = st.n_data * math.log(st.link_precision)
    ng_total = 0.0
    for j, b in enumerate(st.blocks):
        xs = x[st.block_slice(j)]
        if b.ng_prior is None:
            n_gauss += b.size
            logdet += b.size * math.log(prec[j])
        else:
            ng_total += float(np.sum(b.ng_prior.log_density(xs, values)[0]))
    lat = 0.5 * logdet - 0.5 * n_gauss * LOG_2PI - 0.5 * quad + ng_total
    lik = spec.term_evaluator(values)(x)[0]
    return lat + lik + log_prior_theta(spec, theta)


def design_from_columns(n_data, columns: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]], n_effects):
    """Assemble a CSR design from ``(rows, cols, values)`` triplets."""
    rows = np.concatenate([c[0] for c in columns])
    cols = np.concatenate([c[1] for c in columns])
    vals = np.concatenate([c[2] for c in columns])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_data, n_effects))
