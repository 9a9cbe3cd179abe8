"""Rewrite a model with independent non-Gaussian latent components as an LGM.

The non-Gaussian prior of each such component is replaced by a fixed baseline
Gaussian ``N(mu_b, 1/tau_b)`` and one pseudo-observation per component carries
the log ratio ``log pi_NG(b) - log pi_G(b)``. Both densities keep their
normalizing constants, so the rewritten joint density equals the original one
for every ``(x, theta)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import likelihoods as lk
from .errors import InvalidHyper, UnsupportedStructure
from .likelihoods import TermEval
from .model import EffectBlock, LikelihoodTerm, ModelSpec, NonGaussianPrior

__all__ = [
    "CorrectionFamily",
    "ExtendedModel",
    "extend_model",
    "log_ct_loggamma",
    "log_ct_student_t",
    "log_ct_gaussian",
    "BoundednessReport",
    "boundedness_check",
    "DEFAULT_BASELINE_LOG_PRECISION",
]

DEFAULT_BASELINE_LOG_PRECISION = -5.0

KIND_TO_PRIOR = {"log-gamma-frailty": "loggamma", "student-t": "student_t", "gaussian-null": "gaussian"}


@dataclass(frozen=True)
class CorrectionFamily:
    """Correction family plus the baseline Gaussian it corrects.

    ``kind`` is ``log-gamma-frailty``, ``student-t`` or ``gaussian-null``;
    ``hyper_slots`` map the family's parameters to hyperparameter names or
    constants (the block's own prior slots are used when empty).
    """

    kind: str
    baseline_mean: float = 0.0
    baseline_log_precision: float = DEFAULT_BASELINE_LOG_PRECISION
    hyper_slots: Mapping[str, str | float] = field(default_factory=dict)
    null_mean: float | None = None

    def __post_init__(self):
        if self.kind not in KIND_TO_PRIOR:
            raise InvalidHyper(f"unknown correction family {self.kind!r}")
        if not np.isfinite(self.baseline_log_precision):
            raise InvalidHyper("baseline log precision must be finite")

    @property
    def baseline_precision(self):
        return math.exp(self.baseline_log_precision)

    @classmethod
    def gaussian_null(cls, mean=0.0, log_precision=DEFAULT_BASELINE_LOG_PRECISION):
        """Gaussian prior equal to the baseline, so every correction term is zero."""
        return cls("gaussian-null", mean, log_precision, {"prec": math.exp(log_precision)}, null_mean=mean)

    def prior(self):
        slots = dict(self.hyper_slots)
        mean = self.baseline_mean if self.null_mean is None else self.null_mean
        return NonGaussianPrior(KIND_TO_PRIOR[self.kind], slots, mean=mean)

    def evaluate(self, b, values) -> TermEval:
        """Log correction term at ``b`` for the hyperparameter values given."""
        ng = self.prior()
        p = {k: (values[v] if isinstance(v, str) else float(v)) for k, v in ng.slots.items()}
        mu, tau = self.baseline_mean, self.baseline_precision
        if ng.kind == "loggamma":
            return TermEval(*lk.ct_loggamma(b, p["shape"], mu, tau))
        if ng.kind == "student_t":
            return TermEval(*lk.ct_student_t(b, p["prec"], p["dof"], mu, tau))
        return TermEval(*lk.ct_gaussian(b, ng.mean, p["prec"], mu, tau))


@dataclass
class ExtendedModel:
    """Latent Gaussian rewrite of ``original``.

    ``base`` is the LGM (baseline Gaussian priors, correction terms appended to
    its likelihood); ``pseudo_terms`` are those correction terms.
    """

    original: ModelSpec
    base: ModelSpec
    pseudo_terms: tuple[LikelihoodTerm, ...]
    families: tuple[CorrectionFamily, ...]
    ng_blocks: tuple[str, ...]

    @property
    def n_pseudo(self):
        return sum(len(t) for t in self.pseudo_terms)

    @property
    def response_length(self):
        return self.base.structure.n_data + self.n_pseudo


def extend_model(spec: ModelSpec, family: CorrectionFamily | None = None) -> ExtendedModel:
    """Replace every non-Gaussian block prior by the baseline plus correction terms.

    ``family`` sets the baseline (and, if its slots are given, the correction
    parameters); by default the family is inferred from each block's prior with
    a zero-mean baseline of precision ``exp(-5)``.
    """
    st = spec.structure
    blocks = list(st.blocks)
    pseudo = []
    families = []
    names = []
    for j, b in enumerate(st.blocks):
        if b.ng_prior is None:
            continue
        if not b.ng_prior.independent or b.kind != "iid":
            raise UnsupportedStructure(f"block {b.name}: non-Gaussian components must be independent")
        fam = _family_for(b, family)
        if b.ng_prior.kind != KIND_TO_PRIOR[fam.kind]:
            raise UnsupportedStructure(f"block {b.name} has a {b.ng_prior.kind} prior, not {fam.kind}")
        ng = b.ng_prior if not fam.hyper_slots else fam.prior()
        fam = replace(fam, hyper_slots=dict(ng.slots), null_mean=ng.mean)
        mu_b, tau_b = fam.baseline_mean, fam.baseline_precision
        blocks[j] = EffectBlock(b.name, "iid", b.size, tau_b, mean=mu_b)
        sl = st.block_slice(j)
        idx = np.arange(sl.start, sl.stop)
        pseudo.append(
            LikelihoodTerm("correction", idx, np.ones(b.size), ng_prior=ng, baseline=(mu_b, tau_b))
        )
        families.append(fam)
        names.append(b.name)
    new_structure = replace(st, blocks=tuple(blocks))
    base = ModelSpec(new_structure, tuple(spec.terms) + tuple(pseudo), spec.hypers, name=spec.name)
    return ExtendedModel(spec, base, tuple(pseudo), tuple(families), tuple(names))


def _family_for(block, family):
    kind = {v: k for k, v in KIND_TO_PRIOR.items()}[block.ng_prior.kind]
    if family is None:
        return CorrectionFamily(kind)
    return family


def log_ct_loggamma(b, kappa, mu_b=0.0, tau_b=math.exp(DEFAULT_BASELINE_LOG_PRECISION)) -> TermEval:
    """Log-gamma frailty over a Gaussian baseline (``tau_b = 0``: flat baseline)."""
    if not kappa > 0:
        raise InvalidHyper(f"log-gamma shape must be positive, got {kappa}")
    return TermEval(*lk.ct_loggamma(b, kappa, mu_b, tau_b))


def log_ct_student_t(b, psi2, nu, mu_b=0.0, tau_b=math.exp(DEFAULT_BASELINE_LOG_PRECISION)) -> TermEval:
    """Student-t random effect (squared scale ``psi2``) over a Gaussian baseline."""
    if not psi2 > 0 or not nu > 0:
        raise InvalidHyper(f"need psi2 > 0 and nu > 0, got {psi2}, {nu}")
    return TermEval(*lk.ct_student_t(b, 1.0 / psi2, nu, mu_b, tau_b))


def log_ct_gaussian(b, mean, prec, mu_b, tau_b) -> TermEval:
    return TermEval(*lk.ct_gaussian(b, mean, prec, mu_b, tau_b))


@dataclass(frozen=True)
class BoundednessReport:
    sup: float
    argmax: float
    interior: bool
    bounded: bool
    edge_growth: bool


def boundedness_check(family: CorrectionFamily, values: Mapping[str, float], interval=(-10.0, 10.0), n_grid=4001):
    """Scan the log correction term on a grid: where is its supremum, does it grow at the edges?"""
    lo, hi = interval
    grid = np.linspace(lo, hi, n_grid)
    with np.errstate(over="ignore"):
        v = np.asarray(family.evaluate(grid, values).value, dtype=float)
    k = int(np.nanargmax(v))
    interior = 0 < k < n_grid - 1
    growth = bool(v[0] > v[1] or v[-1] > v[-2])
    return BoundednessReport(
        sup=float(v[k]), argmax=float(grid[k]), interior=interior,
        bounded=bool(interior and not growth and np.isfinite(v[k])), edge_growth=growth,
    )
