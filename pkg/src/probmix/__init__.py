"""Probabilistic mixup: vicinal risk minimization by fusing predictive densities."""

from .data import Dataset, gen_toy_regression, gen_toy_rings, load_csv, save_csv, split, standardize
from .densities import (
    CategoricalDensity,
    GaussianDensity,
    MixtureDensity,
    gaussian_log_linear_fuse,
    linear_fuse,
    log_linear_fuse,
)
from .graphs import SamplingGraph, fully_connected, knn_graph
from .metrics import ExperimentRecord, accuracy, mean_nll, mse, rmse
from .models import Mlp, MlpSpec, load_checkpoint, save_checkpoint
from .vicinal import NINE_METHODS, MixingDistribution, RegularizerConfig, regularized_loss

__version__ = "0.1.0"

__all__ = [
    "CategoricalDensity",
    "Dataset",
    "ExperimentRecord",
    "GaussianDensity",
    "MixingDistribution",
    "MixtureDensity",
    "Mlp",
    "MlpSpec",
    "NINE_METHODS",
    "RegularizerConfig",
    "SamplingGraph",
    "accuracy",
    "fully_connected",
    "gaussian_log_linear_fuse",
    "gen_toy_regression",
    "gen_toy_rings",
    "knn_graph",
    "linear_fuse",
    "load_checkpoint",
    "load_csv",
    "log_linear_fuse",
    "mean_nll",
    "mse",
    "regularized_loss",
    "rmse",
    "save_checkpoint",
    "save_csv",
    "split",
    "standardize",
]
