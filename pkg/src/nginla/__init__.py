"""Integrated nested Laplace approximation with near-Gaussian latent fields."""

__version__ = "0.1.0"

from .errors import NginlaError  # noqa: E402
from .inla import InlaFit, InlaOptions, fit  # noqa: E402
from .model import ModelSpec  # noqa: E402
from .near_gaussian import CorrectionFamily, extend_model  # noqa: E402

__all__ = [
    "__version__", "NginlaError", "InlaFit", "InlaOptions", "fit", "ModelSpec", "CorrectionFamily", "extend_model",
]
