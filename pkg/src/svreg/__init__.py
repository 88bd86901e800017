"""Diffeomorphic image registration with spatially varying diffusion regularization."""

from .diffeo import exponentiate, fold_metrics, jacobian_determinant
from .field import Grid, GridMismatchError, compose, sample_linear, warp, warp_nearest
from .optimize import NonFiniteLossError, RegistrationConfig, RegistrationResult, register
from .regularizer import BetaPrior, GaussianPrior, UniformWeight, weighted_diffusion
from .similarity import NccConfig, ncc_loss

__all__ = [
    "BetaPrior",
    "GaussianPrior",
    "Grid",
    "GridMismatchError",
    "NccConfig",
    "NonFiniteLossError",
    "RegistrationConfig",
    "RegistrationResult",
    "UniformWeight",
    "compose",
    "exponentiate",
    "fold_metrics",
    "jacobian_determinant",
    "ncc_loss",
    "register",
    "sample_linear",
    "warp",
    "warp_nearest",
    "weighted_diffusion",
]

__version__ = "0.1.0"
