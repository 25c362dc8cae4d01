"""Approximate Bayesian inference for neural networks by adversarial
alpha-divergence minimization, with AVB and mean-field VI baselines."""

__version__ = "0.1.0"

from .data import (
    LabeledDataset,
    SplitPlan,
    gen_bimodal,
    gen_heteroscedastic,
    load_csv,
    make_split,
    standardize_train,
)
from .estimators import AadmClassifier, AadmRegressor
from .metrics import MetricReport, average_rank, evaluate, predictive_samples
from .objectives import (
    Gaussian1D,
    GaussianMixture1D,
    InferenceConfig,
    alpha_divergence_gaussian,
    alpha_divergence_limit,
    fit_gaussian_min_alpha_div,
)
from .training import load_checkpoint, save_checkpoint, train

__all__ = [
    "AadmClassifier",
    "AadmRegressor",
    "Gaussian1D",
    "GaussianMixture1D",
    "InferenceConfig",
    "LabeledDataset",
    "MetricReport",
    "SplitPlan",
    "alpha_divergence_gaussian",
    "alpha_divergence_limit",
    "average_rank",
    "evaluate",
    "fit_gaussian_min_alpha_div",
    "gen_bimodal",
    "gen_heteroscedastic",
    "load_checkpoint",
    "load_csv",
    "make_split",
    "predictive_samples",
    "save_checkpoint",
    "standardize_train",
    "train",
    "__version__",
]
