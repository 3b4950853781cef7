"""Gaussian processes with learnable invariances via sampled input
augmentations: invariant kernels, unbiased kernel estimators, sparse
variational inference, and a Polya-Gamma logistic bound.
"""

from .estimators import InvariantGpClassifier, InvariantGpRegressor
from .numcore import CholFactor, RngStream, cholesky, draw, pg_kl, pg_mean, tri_solve

__all__ = [
    "CholFactor",
    "InvariantGpClassifier",
    "InvariantGpRegressor",
    "RngStream",
    "cholesky",
    "draw",
    "pg_kl",
    "pg_mean",
    "tri_solve",
]

__version__ = "0.1.0"
