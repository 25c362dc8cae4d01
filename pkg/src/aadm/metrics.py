"""Predictive distributions and the reporting metrics built on them.

Predictions are Monte-Carlo mixtures over posterior weight samples: the
per-point test log-likelihood is a log-mean-exp over the K component
densities, the point prediction is the mixture mean (regression) or a
thresholded mean probability (classification, ties to label 1).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import LOG2PI
from .data import LabeledDataset
from .training import TrainState, network_outputs


@dataclass
class PredictiveSamples:
    """K network outputs per test point plus the current noise variance.

    Regression outputs are means of Gaussian mixture components;
    classification outputs are logits.
    """

    outputs: np.ndarray  # (K, B)
    sigma2: float
    task: str


def predictive_samples(state: TrainState, X, rng, k=None):
    k = state.config.k_test if k is None else k
    return PredictiveSamples(
        outputs=network_outputs(state, X, k, rng),
        sigma2=float(np.exp(state.hyper.log_sigma2[0])),
        task=state.task,
    )


def _logsumexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def predictive_log_lik(samples: PredictiveSamples, y):
    """Per-point log of the K-component mixture density at the targets."""
    f = samples.outputs
    y = np.asarray(y, dtype=np.float64)
    if samples.task == "regression":
        comp = -0.5 * (LOG2PI + math.log(samples.sigma2)) \
            - (y[None, :] - f) ** 2 / (2.0 * samples.sigma2)
    else:
        # log Bernoulli(y | sigmoid(f)) in the saturation-safe form
        comp = -(y[None, :] * np.logaddexp(0.0, -f)
                 + (1.0 - y[None, :]) * np.logaddexp(0.0, f))
    return _logsumexp(comp, axis=0) - math.log(f.shape[0])


def point_prediction(samples: PredictiveSamples):
    """Mixture-mean prediction; classification ties at 1/2 go to label 1."""
    f = samples.outputs
    if samples.task == "regression":
        return f.mean(axis=0)
    prob = _sigmoid(f).mean(axis=0)
    return (prob >= 0.5).astype(np.float64)


def predictive_std(samples: PredictiveSamples):
    """Regression only: sqrt of (spread of means + output noise)."""
    if samples.task != "regression":
        raise ValueError("predictive std is a regression quantity")
    return np.sqrt(samples.outputs.var(axis=0) + samples.sigma2)


def _sigmoid(x):
    t = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + t), t / (1.0 + t))


def rmse(predictions, targets):
    predictions = np.asarray(predictions)
    targets = np.asarray(targets)
    if predictions.shape != targets.shape or predictions.size == 0:
        raise ValueError("predictions and targets must align")
    return float(np.sqrt(np.mean((predictions - targets) ** 2)))


def error_rate(predicted_labels, targets):
    predicted_labels = np.asarray(predicted_labels)
    targets = np.asarray(targets)
    if predicted_labels.shape != targets.shape or predicted_labels.size == 0:
        raise ValueError("labels must align")
    return float(np.mean(predicted_labels != targets))


def predictive_draws(samples: PredictiveSamples, n_draws, rng):
    """Full y* draws (component mean plus output noise) at each point."""
    k, b = samples.outputs.shape
    picks = rng.integers(0, k, size=(n_draws, b))
    means = np.take_along_axis(samples.outputs, picks, axis=0)
    return means + math.sqrt(samples.sigma2) * rng.standard_normal((n_draws, b))


def bimodality_probe(draws, lo, hi):
    """Fraction of predictive draws falling inside the (lo, hi) gap."""
    draws = np.asarray(draws)
    if draws.size < 100:
        raise ValueError("probe needs at least 100 predictive draws")
    if hi <= lo:
        return 0.0
    return float(np.mean((draws > lo) & (draws < hi)))


# ---------------------------------------------------------------------------
# Reports and rank aggregation
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    dataset: str
    method: str
    alpha: float | None
    split: int
    test_log_lik: float
    rmse: float | None = None
    error_rate: float | None = None
    wallclock_seconds: float = 0.0


RESULTS_COLUMNS = [
    "dataset", "method", "alpha", "split", "rmse", "test_log_lik",
    "error_rate", "wallclock_seconds", "status",
]


def evaluate(state: TrainState, test: LabeledDataset, rng,
             wallclock_seconds=0.0):
    """Metrics on held-out data, reported in original target units.

    The state was trained on standardized targets; on that scale the RMSE
    picks up a factor of the target std and each log density sheds
    log(target std).
    """
    samples = predictive_samples(state, test.X, rng)
    ll_std = predictive_log_lik(samples, test.y)
    report = MetricReport(
        dataset=test.source, method=state.config.method,
        alpha=state.config.alpha if state.config.method == "aadm" else None,
        split=0, test_log_lik=float(np.mean(ll_std)),
        wallclock_seconds=wallclock_seconds,
    )
    preds = point_prediction(samples)
    if test.task == "regression":
        report.test_log_lik -= math.log(test.target_std)
        report.rmse = rmse(preds, test.y) * test.target_std
    else:
        report.error_rate = error_rate(preds, test.y)
    return report


def _tied_ranks(values):
    """Rank 1 = smallest; ties share the mean of their positions."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    svals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and svals[j + 1] == svals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def average_rank(reports, metric, direction):
    """Mean and std of per-split ranks for each (method, alpha) variant.

    ``direction`` is "higher" when larger metric values are better (log
    likelihood) and "lower" otherwise (RMSE, error rate).  Every variant
    must appear exactly once in every split.
    """
    if direction not in ("higher", "lower"):
        raise ValueError("direction must be 'higher' or 'lower'")
    by_split = {}
    for r in reports:
        value = getattr(r, metric)
        if value is None:
            raise ValueError(f"report for split {r.split} lacks {metric}")
        by_split.setdefault(r.split, {})[(r.method, r.alpha)] = value
    variants = sorted(
        {v for cells in by_split.values() for v in cells},
        key=lambda mv: (mv[0], -1.0 if mv[1] is None else mv[1]),
    )
    for split, cells in sorted(by_split.items()):
        missing = [v for v in variants if v not in cells]
        if missing:
            raise ValueError(f"split {split} is missing variants {missing}")
    rank_rows = []
    for split in sorted(by_split):
        vals = np.array([by_split[split][v] for v in variants])
        if direction == "higher":
            vals = -vals
        rank_rows.append(_tied_ranks(vals))
    rank_rows = np.asarray(rank_rows)
    return {
        variant: (float(rank_rows[:, j].mean()), float(rank_rows[:, j].std()))
        for j, variant in enumerate(variants)
    }


# ---------------------------------------------------------------------------
# Results CSV
# ---------------------------------------------------------------------------

def append_result(path, report: MetricReport, status="ok"):
    """Append one row, writing the header if the file is new."""
    new = not path_exists_nonempty(path)
    with open(path, "a", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(RESULTS_COLUMNS)
        writer.writerow([
            report.dataset, report.method,
            "" if report.alpha is None else repr(report.alpha), report.split,
            "" if report.rmse is None else repr(report.rmse),
            repr(report.test_log_lik),
            "" if report.error_rate is None else repr(report.error_rate),
            f"{report.wallclock_seconds:.3f}", status,
        ])


def append_failure(path, dataset, method, alpha, split, reason):
    """Record a failed sweep cell so reruns can see it was attempted."""
    new = not path_exists_nonempty(path)
    with open(path, "a", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(RESULTS_COLUMNS)
        writer.writerow([
            dataset, method, "" if alpha is None else repr(alpha), split,
            "", "", "", "0.000", f"failed: {reason}",
        ])


def path_exists_nonempty(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.readline() != ""
    except FileNotFoundError:
        return False


def read_results(path):
    """Rows back as (MetricReport, status) pairs."""
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RESULTS_COLUMNS:
            raise ValueError(f"{path}: unexpected results header {reader.fieldnames}")
        for row in reader:
            report = MetricReport(
                dataset=row["dataset"], method=row["method"],
                alpha=float(row["alpha"]) if row["alpha"] else None,
                split=int(row["split"]),
                test_log_lik=float(row["test_log_lik"]) if row["test_log_lik"] else math.nan,
                rmse=float(row["rmse"]) if row["rmse"] else None,
                error_rate=float(row["error_rate"]) if row["error_rate"] else None,
                wallclock_seconds=float(row["wallclock_seconds"]),
            )
            out.append((report, row["status"]))
    return out
