"""Ready-made model families.

* ``survival_model``: exponential survival times with a log-gamma frailty per group,
* ``tmm_model``: linear mixed model with Student-t random effects and errors,
* ``gaussian_lgm``: the same mixed model with Gaussian random effects and errors.

Each builder returns the original :class:`~nginla.model.ModelSpec`; models with
non-Gaussian blocks are passed through :func:`~nginla.near_gaussian.extend_model`
before fitting.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .model import (
    DEFAULT_LINK_PRECISION,
    EffectBlock,
    HyperPrior,
    LatentStructure,
    LikelihoodTerm,
    ModelSpec,
    NonGaussianPrior,
)

SURVIVAL_FIXED_PRECISION = 0.01
TMM_FIXED_PRECISION = 1e-4


def _design(groups, covariate, n_groups):
    """Columns: one indicator per group, intercept, covariate."""
    n = len(groups)
    rows = np.concatenate([np.arange(n)] * 3)
    cols = np.concatenate([groups, np.full(n, n_groups), np.full(n, n_groups + 1)])
    vals = np.concatenate([np.ones(n), np.ones(n), covariate])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n_groups + 2))


def _groups(groups):
    groups = np.asarray(groups)
    labels, codes = np.unique(groups, return_inverse=True)
    return codes.astype(np.int64), len(labels)


def survival_model(
    times,
    covariate,
    groups,
    event=None,
    kappa_prior=(1.0, 1.0),
    fixed_precision=SURVIVAL_FIXED_PRECISION,
    link_precision=DEFAULT_LINK_PRECISION,
) -> ModelSpec:
    """Exponential hazard ``w_i exp(beta0 + beta1 z)`` with ``w_i ~ Gamma(kappa, kappa)``.

    The latent frailty is ``b_i = log w_i`` and ``kappa`` gets a gamma prior.
    """
    times = np.asarray(times, dtype=float)
    covariate = np.asarray(covariate, dtype=float)
    codes, g = _groups(groups)
    n = times.shape[0]
    blocks = (
        EffectBlock("frailty", "iid", g, None, ng_prior=NonGaussianPrior("loggamma", {"shape": "kappa"})),
        EffectBlock("beta0", "fixed", 1, fixed_precision),
        EffectBlock("beta1", "fixed", 1, fixed_precision),
    )
    st = LatentStructure(n, blocks, _design(codes, covariate, g), link_precision)
    ev = None if event is None else np.asarray(event, dtype=float)
    term = LikelihoodTerm("exponential", st.link_map(), times, event=ev)
    hyper = HyperPrior("kappa", "positive", "gamma", tuple(kappa_prior))
    return ModelSpec(st, (term,), (hyper,), name="survival-gamma-frailty")


def _mixed_blocks(g, random_prior, fixed_precision):
    return (
        random_prior,
        EffectBlock("beta0", "fixed", 1, fixed_precision),
        EffectBlock("beta1", "fixed", 1, fixed_precision),
    )


def tmm_model(
    y,
    covariate,
    groups,
    prec_prior=(1.0, 0.1),
    dof_prior=(3.0, 1.0),
    fixed_precision=TMM_FIXED_PRECISION,
    link_precision=DEFAULT_LINK_PRECISION,
) -> ModelSpec:
    """``y = beta0 + beta1 z + b_i + e`` with ``b_i ~ t(0, psi_b^2, nu)``, ``e ~ t(0, psi_e^2, nu)``.

    Hyperparameters: ``tau_e = 1/psi_e^2``, ``tau_b = 1/psi_b^2`` (gamma priors)
    and ``nu`` with a Gaussian prior on ``log(nu - 5)``.
    """
    y = np.asarray(y, dtype=float)
    codes, g = _groups(groups)
    ng = NonGaussianPrior("student_t", {"prec": "tau_b", "dof": "nu"})
    blocks = _mixed_blocks(g, EffectBlock("b", "iid", g, None, ng_prior=ng), fixed_precision)
    st = LatentStructure(y.shape[0], blocks, _design(codes, np.asarray(covariate, float), g), link_precision)
    term = LikelihoodTerm("student_t", st.link_map(), y, slots={"prec": "tau_e", "dof": "nu"})
    hypers = (
        HyperPrior("tau_e", "positive", "gamma", tuple(prec_prior)),
        HyperPrior("tau_b", "positive", "gamma", tuple(prec_prior)),
        HyperPrior("nu", "dof", "gaussian", tuple(dof_prior), shift=5.0),
    )
    return ModelSpec(st, (term,), hypers, name="t-mixed-effects")


def gaussian_lgm(
    y,
    covariate,
    groups,
    prec_prior=(1.0, 0.1),
    fixed_precision=TMM_FIXED_PRECISION,
    link_precision=DEFAULT_LINK_PRECISION,
    tau_e=None,
) -> ModelSpec:
    """Gaussian mixed model ``y = beta0 + beta1 z + b_i + e``.

    Hyperparameters ``tau_e`` and ``tau_b`` get gamma priors; passing a number
    for ``tau_e`` fixes the error precision and leaves ``tau_b`` as the only one.
    """
    y = np.asarray(y, dtype=float)
    codes, g = _groups(groups)
    blocks = _mixed_blocks(g, EffectBlock("b", "iid", g, "tau_b"), fixed_precision)
    st = LatentStructure(y.shape[0], blocks, _design(codes, np.asarray(covariate, float), g), link_precision)
    hypers = [HyperPrior("tau_b", "positive", "gamma", tuple(prec_prior))]
    if tau_e is None:
        hypers.insert(0, HyperPrior("tau_e", "positive", "gamma", tuple(prec_prior)))
        slot = "tau_e"
    else:
        slot = float(tau_e)
    term = LikelihoodTerm("gaussian", st.link_map(), y, slots={"prec": slot})
    return ModelSpec(st, (term,), tuple(hypers), name="gaussian-lgm")


BUILDERS = {
    "survival-gamma-frailty": survival_model,
    "t-mixed-effects": tmm_model,
    "gaussian-lgm": gaussian_lgm,
}
