"""Dataset generation, CSV ingestion, standardization and split plans.

The CSV dialect is deliberately narrow: comma separated, '.' decimals, an
optional single header line, no quoting.  UCI-style tables must be
converted to this dialect up front.  Features and (regression) targets
are standardized with *training* statistics only; metrics are transformed
back to original units downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

TASKS = ("regression", "binary")


@dataclass
class LabeledDataset:
    """An immutable-by-convention table of inputs and targets.

    The standardization fields hold whatever transform produced ``X`` and
    ``y`` from raw units (identity until :func:`standardize_train` runs).
    """

    X: np.ndarray
    y: np.ndarray
    task: str = "regression"
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None
    target_mean: float = 0.0
    target_std: float = 1.0
    source: str = ""

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.X.ndim != 2:
            raise ValueError("X must be 2-d")
        if self.y.shape != (self.X.shape[0],):
            raise ValueError("y must be one target per row")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.task == "binary" and not np.isin(self.y, (0.0, 1.0)).all():
            raise ValueError("binary targets must be encoded as {0, 1}")

    def __len__(self):
        return self.X.shape[0]

    @property
    def n_features(self):
        return self.X.shape[1]


@dataclass(frozen=True)
class SplitPlan:
    """Reproducible 90/10 splits: (seed, index) pins the permutation."""

    seed: int
    index: int = 0
    count: int = 20

    def rng(self):
        return np.random.default_rng(np.random.SeedSequence([self.seed, self.index]))


def gen_heteroscedastic(n, seed):
    """x ~ U[-4, 4]; y = 7 sin(x) + 3 |cos(x/2)| eps with eps ~ N(0, 1)."""
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-4.0, 4.0, n)
    eps = rng.standard_normal(n)
    y = 7.0 * np.sin(x) + 3.0 * np.abs(np.cos(x / 2.0)) * eps
    return LabeledDataset(X=x[:, None], y=y, task="regression",
                          source=f"heteroscedastic(n={n},seed={seed})")


def gen_bimodal(n, seed):
    """x ~ U[-2, 2]; y = 10 sin(x) + eps or 10 cos(x) + eps, a fair coin."""
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2.0, 2.0, n)
    eps = rng.standard_normal(n)
    branch = rng.random(n) < 0.5
    y = np.where(branch, 10.0 * np.sin(x), 10.0 * np.cos(x)) + eps
    return LabeledDataset(X=x[:, None], y=y, task="regression",
                          source=f"bimodal(n={n},seed={seed})")


GENERATORS = {"heteroscedastic": gen_heteroscedastic, "bimodal": gen_bimodal}


class CsvFormatError(ValueError):
    """Malformed input table; the message carries the offending line."""


def load_csv(path, task="regression", target_column=None, header=None,
             expect_shape=None):
    """Read a numeric table into a dataset.

    ``target_column`` defaults to the last column.  ``header`` may be
    True/False or None to sniff (a first line with any non-numeric cell).
    ``expect_shape`` optionally validates (rows, feature columns).
    """
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    lines = [ln for ln in lines if ln.strip() != ""]
    if not lines:
        raise CsvFormatError(f"{path}: empty file")

    def parse(ln):
        return [cell.strip() for cell in ln.split(",")]

    first = parse(lines[0])
    if header is None:
        header = any(not _is_number(cell) for cell in first)
    rows = []
    start = 1 if header else 0
    width = None
    for lineno, ln in enumerate(lines[start:], start=start + 1):
        cells = parse(ln)
        if width is None:
            width = len(cells)
        elif len(cells) != width:
            raise CsvFormatError(
                f"{path}:{lineno}: expected {width} columns, found {len(cells)}"
            )
        try:
            rows.append([float(c) for c in cells])
        except ValueError:
            bad = next(c for c in cells if not _is_number(c))
            raise CsvFormatError(
                f"{path}:{lineno}: non-numeric cell {bad!r}"
            ) from None
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    table = np.asarray(rows, dtype=np.float64)
    tcol = table.shape[1] - 1 if target_column is None else target_column
    y = table[:, tcol]
    X = np.delete(table, tcol, axis=1)
    if expect_shape is not None and (X.shape[0], X.shape[1]) != tuple(expect_shape):
        raise CsvFormatError(
            f"{path}: shape {X.shape} does not match expected {tuple(expect_shape)}"
        )
    return LabeledDataset(X=X, y=y, task=task, source=str(path))


def _is_number(cell):
    try:
        float(cell)
        return True
    except ValueError:
        return False


def save_csv(dataset, path, header=True):
    """Write a dataset in the same dialect ``load_csv`` reads."""
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            cols = [f"x{j}" for j in range(dataset.n_features)] + ["y"]
            fh.write(",".join(cols) + "\n")
        for xi, yi in zip(dataset.X, dataset.y):
            cells = [repr(float(v)) for v in xi] + [repr(float(yi))]
            fh.write(",".join(cells) + "\n")


def make_split(dataset, plan):
    """90/10 train/test partition, deterministic from (seed, index)."""
    n = len(dataset)
    if n < 10:
        raise ValueError("need at least 10 rows to hold out 10%")
    order = plan.rng().permutation(n)
    n_test = n // 10
    test_idx = np.sort(order[:n_test])
    train_idx = np.sort(order[n_test:])
    return _take(dataset, train_idx), _take(dataset, test_idx)


def _take(dataset, idx):
    return replace(dataset, X=dataset.X[idx].copy(), y=dataset.y[idx].copy())


def standardize_train(train):
    """Zero-mean unit-std features (constant columns keep std 1); for
    regression the target is standardized as well.  Returns a new dataset
    carrying the statistics used."""
    mean = train.X.mean(axis=0)
    std = train.X.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    X = (train.X - mean) / std
    if train.task == "regression":
        t_mean = float(train.y.mean())
        t_std = float(train.y.std())
        if t_std < 1e-12:
            t_std = 1.0
        y = (train.y - t_mean) / t_std
    else:
        t_mean, t_std = 0.0, 1.0
        y = train.y.copy()
    return replace(train, X=X, y=y, feature_mean=mean, feature_std=std,
                   target_mean=t_mean, target_std=t_std)


def apply_standardization(dataset, fitted):
    """Standardize held-out data with *training* statistics only."""
    if fitted.feature_mean is None:
        raise ValueError("fitted dataset carries no statistics")
    X = (dataset.X - fitted.feature_mean) / fitted.feature_std
    y = (dataset.y - fitted.target_mean) / fitted.target_std
    return replace(dataset, X=X, y=y, feature_mean=fitted.feature_mean,
                   feature_std=fitted.feature_std, target_mean=fitted.target_mean,
                   target_std=fitted.target_std)


def unstandardize_targets(y, dataset):
    """Map standardized targets or predictions back to original units."""
    return y * dataset.target_std + dataset.target_mean
