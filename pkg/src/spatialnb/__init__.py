"""Bayesian spatial negative binomial regression with MESS dependence.

Two estimators share one model: a Pólya-Gamma Gibbs sampler
(:mod:`spatialnb.mcmc`) and grid-based integrated non-factorised
variational Bayes (:mod:`spatialnb.infvb`).
"""

__version__ = "0.1.0"

from .model import Dataset, Hyperparams, McmcState, log_likelihood  # noqa: E402
from .spatial import SpatialWeights, knn_weight_matrix, matrix_exponential  # noqa: E402

__all__ = [
    "Dataset",
    "Hyperparams",
    "McmcState",
    "SpatialWeights",
    "knn_weight_matrix",
    "log_likelihood",
    "matrix_exponential",
]
