"""
Multivariate log-Gaussian Cox processes on the sphere.

Great-circle geometry and grids, the parsimonious exponential Matern
cross-covariance, a full-scale approximation for large grids, the Monte
Carlo likelihood with common random numbers, Nelder-Mead fitting, and a
small data pipeline for gridded atmospheric covariates.
"""

from .covariance import MultiMaternParams, assemble_joint_cov, exponential_cov, validate_params
from .cov_approx import DenseFieldSimulator, FsaFieldSimulator, build_fsa, implied_cov
from .estimation import FitConfig, FitResult, fit, initial_params, pack, profile, unpack
from .lgcp import (IntensitySurface, ModelParams, PointPattern, loglik_given_lambda, mc_loglik,
                   simulate_pattern)
from .sphere_geom import Region, SpherePoint, build_grid, distance_matrix, place_knots

__version__ = "0.1.0"

__all__ = [
    "MultiMaternParams", "assemble_joint_cov", "exponential_cov", "validate_params",
    "DenseFieldSimulator", "FsaFieldSimulator", "build_fsa", "implied_cov",
    "FitConfig", "FitResult", "fit", "initial_params", "pack", "profile", "unpack",
    "IntensitySurface", "ModelParams", "PointPattern", "loglik_given_lambda", "mc_loglik",
    "simulate_pattern", "Region", "SpherePoint", "build_grid", "distance_matrix", "place_knots",
]
