"""Command-line surface: train, sweep, rank, gen-data, predict.

Runs are configured by a flat key=value text file (documented in
``CONFIG_KEYS``); unknown keys are hard errors so typos cannot silently
corrupt a sweep.  Every run directory receives a manifest before training
starts, and all randomness descends from the single config seed through
documented stream splitting (run seed -> split seed -> per-cell training
seed -> sampler streams), so sweeps reproduce cell by cell.

Exit codes: 1 invalid config or arguments, 2 dataset/input errors,
3 training failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NonFiniteValue
from .data import (
    GENERATORS,
    CsvFormatError,
    SplitPlan,
    apply_standardization,
    load_csv,
    make_split,
    save_csv,
    standardize_train,
)
from .metrics import (
    append_failure,
    append_result,
    average_rank,
    evaluate,
    point_prediction,
    predictive_log_lik,
    predictive_samples,
    predictive_std,
    read_results,
)
from .objectives import InferenceConfig
from .training import load_checkpoint, save_checkpoint, train


class ConfigError(ValueError):
    pass


class TrainingFailure(RuntimeError):
    pass


@dataclass
class RunSpec:
    """A parsed config file: inference settings plus the dataset source."""

    inference: InferenceConfig
    dataset: str = "heteroscedastic"
    dataset_n: int = 1000
    task: str = "regression"
    target_column: int | None = None
    header: bool | None = None
    split_index: int = 0
    alphas: tuple = ()
    splits: int = 5
    baselines: tuple = ()


_INFERENCE_KEYS = {
    "method": str, "alpha": float, "epochs": int, "batch_size": int,
    "k_train": int, "k_test": int, "annealing": bool, "warmup_fraction": float,
    "lr_generator": float, "lr_discriminator": float, "seed": int,
    "hidden": tuple, "noise_dim": int, "gen_hidden": tuple,
    "disc_hidden": tuple, "leaky_slope": float, "disc_steps": int,
    "adaptive_contrast": bool, "train_hyperparams": bool,
    "init_sigma2": float, "init_sigma0_sq": float,
}

_RUN_KEYS = {
    "dataset": str, "dataset_n": int, "task": str, "target_column": int,
    "header": bool, "split_index": int, "alphas": tuple, "splits": int,
    "baselines": tuple,
}

CONFIG_KEYS = {**_INFERENCE_KEYS, **_RUN_KEYS}


def _parse_value(key, raw, kind):
    raw = raw.strip()
    if raw.lower() == "none":
        return None
    try:
        if kind is bool:
            if raw.lower() in ("true", "false"):
                return raw.lower() == "true"
            raise ValueError("expected true/false")
        if kind is tuple:
            if raw == "":
                return ()
            return tuple(
                float(p) if "." in p or "e" in p.lower() else int(p)
                for p in raw.split(",") if p.strip() != ""
            )
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {key}={raw!r}: {exc}") from None


def parse_config(text):
    """key=value lines into a RunSpec; unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw, CONFIG_KEYS[key])
    inf_kwargs = {k: v for k, v in values.items() if k in _INFERENCE_KEYS}
    run_kwargs = {k: v for k, v in values.items() if k in _RUN_KEYS}
    try:
        inference = InferenceConfig(**inf_kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if "alphas" in run_kwargs and run_kwargs["alphas"] is not None:
        run_kwargs["alphas"] = tuple(float(a) for a in run_kwargs["alphas"])
    if "baselines" in run_kwargs and run_kwargs["baselines"] is not None:
        raise ConfigError("baselines belongs on the sweep command line")
    spec = RunSpec(inference=inference, **run_kwargs)
    if spec.task not in ("regression", "binary"):
        raise ConfigError(f"task must be regression or binary, got {spec.task!r}")
    return spec


def serialize_config(spec):
    """Inverse of :func:`parse_config` (identity on round trips)."""
    lines = []
    cfg = spec.inference.to_dict()
    for key in _INFERENCE_KEYS:
        value = cfg[key]
        lines.append(f"{key}={_format_value(value)}")
    for key in ("dataset", "dataset_n", "task", "target_column", "header",
                "split_index", "alphas", "splits"):
        lines.append(f"{key}={_format_value(getattr(spec, key))}")
    return "\n".join(lines) + "\n"


def _format_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_dataset(spec):
    """Resolve the config's dataset source (generator name or CSV path)."""
    if spec.dataset in GENERATORS:
        return GENERATORS[spec.dataset](spec.dataset_n, seed=spec.inference.seed)
    path = Path(spec.dataset)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return load_csv(path, task=spec.task, target_column=spec.target_column,
                    header=spec.header)


def _split_and_standardize(dataset, seed, split_index):
    train_raw, test_raw = make_split(dataset, SplitPlan(seed=seed, index=split_index))
    train_std = standardize_train(train_raw)
    test_std = apply_standardization(test_raw, train_std)
    return train_std, test_std


def _write_manifest(out_dir, spec, config_path, command):
    manifest = {
        "format": "aadm-manifest",
        "version": __version__,
        "command": command,
        "config_file": str(config_path),
        "resolved_config": serialize_config(spec),
        "dataset": spec.dataset,
        "out_dir": str(out_dir),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)


def _train_once(spec, out_dir=None, seed=None, split_index=None):
    """Split, standardize, train, evaluate; optionally write artifacts."""
    cfg = spec.inference
    if seed is not None or split_index is not None:
        d = cfg.to_dict()
        if seed is not None:
            d["seed"] = int(seed)
        cfg = InferenceConfig.from_dict(d)
    split_index = spec.split_index if split_index is None else split_index
    dataset = load_dataset(spec)
    train_std, test_std = _split_and_standardize(dataset, cfg.seed, split_index)

    writer = None
    metrics_fh = None
    if out_dir is not None:
        metrics_fh = open(out_dir / "metrics.csv", "w", encoding="utf-8")
        from .training import EpochMetrics

        metrics_fh.write(",".join(EpochMetrics.HEADER) + "\n")

        def writer(m):
            metrics_fh.write(",".join(str(c) for c in m.row()) + "\n")

    started = time.perf_counter()
    try:
        state, _history = train(cfg, train_std.X, train_std.y, dataset.task,
                                metrics_writer=writer)
    except NonFiniteValue as exc:
        raise TrainingFailure(str(exc)) from exc
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    elapsed = time.perf_counter() - started

    eval_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7919]))
    report = evaluate(state, test_std, eval_rng, wallclock_seconds=elapsed)
    report.dataset = spec.dataset
    report.split = split_index

    if out_dir is not None:
        state.extra["standardization"] = {
            "feature_mean": train_std.feature_mean.tolist(),
            "feature_std": train_std.feature_std.tolist(),
            "target_mean": train_std.target_mean,
            "target_std": train_std.target_std,
            "task": dataset.task,
        }
        save_checkpoint(state, out_dir / "checkpoint.npz")
        append_result(out_dir / "result.csv", report)
    return state, report


def cmd_train(args):
    config_path = Path(args.config)
    spec = parse_config(config_path.read_text(encoding="utf-8"))
    if args.seed is not None:
        d = spec.inference.to_dict()
        d["seed"] = args.seed
        spec.inference = InferenceConfig.from_dict(d)
    out_dir = Path(args.out)
    _write_manifest(out_dir, spec, config_path, "train")
    _train_once(spec, out_dir=out_dir)
    print(f"run complete: {out_dir}")
    return 0


def _cell_seed(base_seed, method, alpha, split):
    """Deterministic per-cell training seed for sweep reproducibility."""
    method_code = {"aadm": 0, "avb": 1, "vi": 2}[method]
    alpha_code = 0 if alpha is None else int(round(alpha * 1_000_000))
    ss = np.random.SeedSequence([base_seed, method_code, alpha_code, split])
    return int(ss.generate_state(1)[0])


def _run_cell(payload):
    """Executed possibly in a worker process; returns a result row dict."""
    config_text, method, alpha, split = payload
    spec = parse_config(config_text)
    d = spec.inference.to_dict()
    d["method"] = method
    d["alpha"] = alpha if method == "aadm" else None
    d["seed"] = _cell_seed(spec.inference.seed, method, alpha, split)
    spec.inference = InferenceConfig.from_dict(d)
    _, report = _train_once(spec, split_index=split)
    report.method = method
    report.alpha = alpha if method == "aadm" else None
    return report


def cmd_sweep(args):
    config_path = Path(args.config)
    spec = parse_config(config_path.read_text(encoding="utf-8"))
    if args.alphas is None:
        alphas = spec.alphas
    else:
        try:
            alphas = tuple(
                float(a) for a in args.alphas.split(",") if a.strip() != ""
            )
        except ValueError as exc:
            raise ConfigError(f"bad --alphas: {exc}") from None
    if not alphas:
        raise ConfigError("sweep needs a non-empty alpha list")
    splits = args.splits if args.splits is not None else spec.splits
    baselines = tuple(b for b in args.baselines.split(",") if b) \
        if args.baselines else ()
    for b in baselines:
        if b not in ("avb", "vi"):
            raise ConfigError(f"unknown baseline {b!r}")

    out_dir = Path(args.out)
    _write_manifest(out_dir, spec, config_path, "sweep")
    results_path = out_dir / "results.csv"
    done = set()
    if results_path.exists():
        for report, status in read_results(results_path):
            if status == "ok":
                done.add((report.method, report.alpha, report.split))

    cells = [("aadm", a, s) for a in alphas for s in range(splits)]
    cells += [(m, None, s) for m in baselines for s in range(splits)]
    todo = [c for c in cells if c not in done]
    print(f"sweep: {len(cells)} cells, {len(done)} already complete, "
          f"{len(todo)} to run")

    config_text = serialize_config(spec)
    payloads = [(config_text, m, a, s) for m, a, s in todo]
    if args.threads > 1:
        with ProcessPoolExecutor(max_workers=args.threads) as pool:
            outcomes = pool.map(_run_cell_safe, payloads)
    else:
        outcomes = map(_run_cell_safe, payloads)
    failures = 0
    for payload, outcome in zip(payloads, outcomes):
        _, method, alpha, split = payload
        if isinstance(outcome, Exception):
            failures += 1
            append_failure(results_path, spec.dataset, method, alpha, split,
                           repr(outcome))
        else:
            append_result(results_path, outcome)
    print(f"sweep finished: {len(todo) - failures} ok, {failures} failed "
          f"-> {results_path}")
    return 0


def _run_cell_safe(payload):
    try:
        return _run_cell(payload)
    except Exception as exc:  # cell failures are recorded, not fatal
        return exc


_METRIC_DIRECTIONS = {"loglik": ("test_log_lik", "higher"),
                      "rmse": ("rmse", "lower"),
                      "error": ("error_rate", "lower")}


def cmd_rank(args):
    metric, default_dir = _METRIC_DIRECTIONS[args.metric]
    direction = args.direction or default_dir
    rows = [r for r, status in read_results(Path(args.results)) if status == "ok"]
    if not rows:
        raise ConfigError(f"no usable rows in {args.results}")
    try:
        ranks = average_rank(rows, metric, direction)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out_path = Path(args.out) if args.out else Path(args.results).with_name(
        f"ranks_{args.metric}.csv"
    )
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("method,alpha,mean_rank,std_rank\n")
        for (method, alpha), (mean, std) in sorted(ranks.items()):
            alpha_cell = "" if alpha is None else repr(alpha)
            fh.write(f"{method},{alpha_cell},{mean!r},{std!r}\n")
    print(f"rank table -> {out_path}")
    return 0


def cmd_gen_data(args):
    if args.generator not in GENERATORS:
        raise ConfigError(
            f"unknown generator {args.generator!r}; pick from {sorted(GENERATORS)}"
        )
    if args.n < 1:
        raise ConfigError("n must be >= 1")
    dataset = GENERATORS[args.generator](args.n, seed=args.seed)
    save_csv(dataset, args.out)
    print(f"wrote {args.n} rows -> {args.out}")
    return 0


def cmd_predict(args):
    try:
        state = load_checkpoint(args.checkpoint)
    except Exception as exc:
        raise CsvFormatError(f"cannot load checkpoint {args.checkpoint}: {exc}") \
            from exc
    stats = state.extra.get("standardization")
    if stats is None:
        raise CsvFormatError(
            f"{args.checkpoint} lacks standardization metadata; re-train with "
            "the current CLI"
        )
    feature_mean = np.asarray(stats["feature_mean"])
    feature_std = np.asarray(stats["feature_std"])
    t_mean, t_std = stats["target_mean"], stats["target_std"]

    table = load_csv(args.input, task="regression", header=args.header)
    d = state.spec.input_dim
    if table.X.shape[1] + 1 == d:
        # no target column present: the loader peeled one off, put it back
        X = np.column_stack([table.X, table.y])
        y = None
    elif table.X.shape[1] == d:
        X = table.X
        y = table.y
    else:
        raise CsvFormatError(
            f"{args.input}: {table.X.shape[1] + 1} columns incompatible with "
            f"model input dimension {d}"
        )
    Xs = (X - feature_mean) / feature_std
    rng = np.random.default_rng(np.random.SeedSequence([state.config.seed, 7919]))
    samples = predictive_samples(state, Xs, rng)

    out_path = Path(args.out)
    with open(out_path, "w", encoding="utf-8") as fh:
        task = stats["task"]
        if task == "regression":
            mean = point_prediction(samples) * t_std + t_mean
            std = predictive_std(samples) * t_std
            cols = ["prediction", "predictive_std"]
            rows = [mean, std]
            if y is not None:
                ll = predictive_log_lik(samples, (y - t_mean) / t_std) \
                    - math.log(t_std)
                cols.append("log_likelihood")
                rows.append(ll)
        else:
            labels = point_prediction(samples)
            cols, rows = ["prediction"], [labels]
            if y is not None:
                if not np.isin(y, (0.0, 1.0)).all():
                    raise CsvFormatError(
                        f"{args.input}: classification targets must be 0/1"
                    )
                cols.append("log_likelihood")
                rows.append(predictive_log_lik(samples, y))
        fh.write(",".join(cols) + "\n")
        for i in range(len(rows[0])):
            fh.write(",".join(repr(float(r[i])) for r in rows) + "\n")
    print(f"predictions -> {out_path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="aadm",
        description="Bayesian neural network training by adversarial "
                    "alpha-divergence minimization, with AVB and VI baselines.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training job from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="alpha x split grid, resumable")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alphas", default=None,
                   help="comma-separated alpha values (overrides config)")
    p.add_argument("--splits", type=int, default=None)
    p.add_argument("--baselines", default=None,
                   help="comma-separated subset of avb,vi to include")
    p.add_argument("--threads", type=int, default=1,
                   help="worker processes for independent cells")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("rank", help="average-rank table from a results CSV")
    p.add_argument("--results", required=True)
    p.add_argument("--metric", choices=sorted(_METRIC_DIRECTIONS), required=True)
    p.add_argument("--direction", choices=["higher", "lower"], default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    p.add_argument("--generator", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("predict", help="point predictions from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--header", default=None, type=lambda s: s == "true",
                   help="true/false; default sniffs the first line")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CsvFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingFailure as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
