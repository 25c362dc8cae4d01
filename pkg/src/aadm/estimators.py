"""Scikit-learn style estimators wrapping the training machinery.

``AadmRegressor`` and ``AadmClassifier`` expose the usual
fit/predict/get_params surface so the inference method drops into
pipelines, grid searches and cross-validation like any other estimator.
Standardization happens inside ``fit``; predictions come back in the
original target units.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import LabeledDataset, standardize_train
from .metrics import (
    point_prediction,
    predictive_draws,
    predictive_log_lik,
    predictive_samples,
    predictive_std,
)
from .objectives import InferenceConfig
from .training import train


class _BnnEstimator(BaseEstimator):
    """Shared parameter surface and fitting path for both task kinds."""

    _task = None

    def __init__(self, method="aadm", alpha=0.5, epochs=100, batch_size=10,
                 k_train=10, k_test=100, annealing=True, warmup_fraction=0.1,
                 lr=1e-4, disc_lr=1e-3, hidden=(50, 50), noise_dim=100,
                 gen_hidden=(50, 50), disc_hidden=(50, 50), leaky_slope=0.2,
                 disc_steps=1, adaptive_contrast=True, train_hyperparams=True,
                 standardize=True, random_state=None):
        self.method = method
        self.alpha = alpha
        self.epochs = epochs
        self.batch_size = batch_size
        self.k_train = k_train
        self.k_test = k_test
        self.annealing = annealing
        self.warmup_fraction = warmup_fraction
        self.lr = lr
        self.disc_lr = disc_lr
        self.hidden = hidden
        self.noise_dim = noise_dim
        self.gen_hidden = gen_hidden
        self.disc_hidden = disc_hidden
        self.leaky_slope = leaky_slope
        self.disc_steps = disc_steps
        self.adaptive_contrast = adaptive_contrast
        self.train_hyperparams = train_hyperparams
        self.standardize = standardize
        self.random_state = random_state

    def _config(self):
        return InferenceConfig(
            method=self.method,
            alpha=self.alpha if self.method == "aadm" else None,
            epochs=self.epochs, batch_size=self.batch_size,
            k_train=self.k_train, k_test=self.k_test,
            annealing=self.annealing, warmup_fraction=self.warmup_fraction,
            lr_generator=self.lr, lr_discriminator=self.disc_lr,
            seed=0 if self.random_state is None else int(self.random_state),
            hidden=tuple(self.hidden), noise_dim=self.noise_dim,
            gen_hidden=tuple(self.gen_hidden),
            disc_hidden=tuple(self.disc_hidden),
            leaky_slope=self.leaky_slope, disc_steps=self.disc_steps,
            adaptive_contrast=self.adaptive_contrast,
            train_hyperparams=self.train_hyperparams,
        )

    def _fit_dataset(self, dataset):
        config = self._config()
        fitted = standardize_train(dataset) if self.standardize else dataset
        self.train_stats_ = fitted
        self.state_, self.history_ = train(
            config, fitted.X, fitted.y, dataset.task
        )
        self.n_features_in_ = dataset.n_features
        return self

    def _standardized(self, X):
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features; fitted with {self.n_features_in_}"
            )
        if self.standardize:
            return (X - self.train_stats_.feature_mean) / self.train_stats_.feature_std
        return X

    _PREDICT_STREAM = 9001  # distinct from the training stream indices

    def _predict_rng(self):
        # Re-derived per call so repeated predictions are identical.
        seed = 0 if self.random_state is None else int(self.random_state)
        return np.random.default_rng(
            np.random.SeedSequence([seed, self._PREDICT_STREAM])
        )


class AadmRegressor(_BnnEstimator, RegressorMixin):
    """Bayesian-neural-network regressor trained by adversarial
    alpha-divergence minimization (or the AVB / mean-field VI baselines).

    Parameters mirror the training configuration; see the package README
    for the protocol defaults they follow.
    """

    _task = "regression"

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True, dtype=np.float64)
        return self._fit_dataset(LabeledDataset(X=X, y=y, task="regression"))

    def _samples(self, X):
        Xs = self._standardized(X)
        return predictive_samples(self.state_, Xs, self._predict_rng())

    def predict(self, X, return_std=False):
        samples = self._samples(X)
        stats = self.train_stats_
        mean = point_prediction(samples) * stats.target_std + stats.target_mean
        if not return_std:
            return mean
        return mean, predictive_std(samples) * stats.target_std

    def sample_y(self, X, n_draws=100):
        """Full predictive draws (weights plus output noise), original units."""
        samples = self._samples(X)
        draws = predictive_draws(samples, n_draws, self._predict_rng())
        return draws * self.train_stats_.target_std + self.train_stats_.target_mean

    def log_likelihood(self, X, y):
        """Mean per-point predictive log density in original units."""
        samples = self._samples(X)
        y = np.asarray(y, dtype=np.float64)
        y_std = (y - self.train_stats_.target_mean) / self.train_stats_.target_std
        ll = predictive_log_lik(samples, y_std)
        return float(np.mean(ll)) - float(np.log(self.train_stats_.target_std))


class AadmClassifier(_BnnEstimator, ClassifierMixin):
    """Binary classifier counterpart with a single-logit Bernoulli head."""

    _task = "binary"

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.unique(y)
        if self.classes_.size != 2:
            raise ValueError("binary classification needs exactly two classes")
        y01 = (y == self.classes_[1]).astype(np.float64)
        return self._fit_dataset(LabeledDataset(X=X, y=y01, task="binary"))

    def _samples(self, X):
        Xs = self._standardized(X)
        return predictive_samples(self.state_, Xs, self._predict_rng())

    def predict_proba(self, X):
        samples = self._samples(X)
        t = np.exp(-np.abs(samples.outputs))
        probs = np.where(samples.outputs >= 0, 1 / (1 + t), t / (1 + t)).mean(axis=0)
        return np.column_stack([1 - probs, probs])

    def predict(self, X):
        labels01 = point_prediction(self._samples(X))
        return self.classes_[labels01.astype(int)]

    def log_likelihood(self, X, y):
        samples = self._samples(X)
        y01 = (np.asarray(y) == self.classes_[1]).astype(np.float64)
        return float(np.mean(predictive_log_lik(samples, y01)))
