"""Run orchestration: seeding, dataset assembly, training, CSV/metric output,
comparisons, and the verification-check runner.

Every random draw descends from the master seed through fixed stream indices
(data, init, shuffle, selection), so swapping the regularizer leaves the data
and initialization untouched, and a (config, seed) pair determines every
output byte.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import datasets, oracle, training
from .config import (
    ExperimentConfig,
    UsageError,
    build_network,
    config_echo_lines,
    parse_shape,
)
from .netcore import SampleBatch
from .regularizers import DampingSequence
from .training import (
    AlrRegularizer,
    DlrRegularizer,
    DropoutRegularizer,
    NoRegularizer,
    RunData,
    SnapshotLowRankRegularizer,
    TrainSettings,
    WeightDecayRegularizer,
)

STREAM_DATA = 0
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_SELECT = 3

# fields allowed to differ between configs in a comparison table
_COMPARE_FIELDS = ("name", "regularizer", "damping", "dropout_rate", "weight_decay", "asr_gamma")


def stream_rng(seed, stream):
    return np.random.default_rng([int(seed), int(stream)])


@dataclass
class RunReport:
    config: ExperimentConfig
    final: training.EpochMetrics
    epochs_run: int
    metrics_path: str
    report_path: str


def _dataset_params(cfg):
    if cfg.dataset == "gaussian-regression":
        return dict(
            dim=cfg.features,
            targets=cfg.targets,
            train_n=cfg.train_n,
            val_n=cfg.val_n,
            test_n=cfg.test_n,
            input_std=cfg.input_std,
            teacher_std=cfg.teacher_std,
            noise_std=cfg.noise_std,
        )
    if cfg.dataset == "separable-classification":
        return dict(
            classes=cfg.classes,
            dim=cfg.features,
            train_n=cfg.train_n,
            val_n=cfg.val_n,
            test_n=cfg.test_n,
            spread=cfg.spread,
            noise=cfg.noise,
        )
    return dict(noise=cfg.noise, train_n=cfg.train_n, val_n=cfg.val_n, test_n=cfg.test_n)


def assemble_data(cfg):
    """Build the RunData splits for a config, reshaping for conv models."""
    if cfg.dataset == "csv":
        splits = datasets.load_dataset(
            cfg.csv_dir, cfg.csv_name, cfg.csv_targets if cfg.csv_targets > 0 else None
        )
        splits = datasets.normalize_splits(splits)
    else:
        splits = datasets.generate(cfg.dataset, seed=[cfg.seed, STREAM_DATA], **_dataset_params(cfg))
    shape = parse_shape(cfg.input_shape) if cfg.input_shape else None

    def as_batch(pair):
        x, y = pair
        if shape is not None:
            x = x.reshape((x.shape[0],) + shape)
        return SampleBatch(x, y)

    train = as_batch(splits.train)
    val = as_batch(splits.val)
    test = as_batch(splits.test)
    probe = val.inputs[: min(cfg.probe_size, val.size)]
    return RunData(train=train, val=val, test=test, probe_inputs=probe)


def build_regularizer(cfg, n_layers):
    if cfg.regularizer == "none":
        return NoRegularizer()
    if cfg.regularizer == "dlr":
        return DlrRegularizer(k=cfg.lrf_rank)
    if cfg.regularizer == "alr":
        return AlrRegularizer(DampingSequence(cfg.damping), k=cfg.lrf_rank)
    if cfg.regularizer == "dropout":
        return DropoutRegularizer(cfg.dropout_rate)
    if cfg.regularizer == "weight_decay":
        return WeightDecayRegularizer(cfg.weight_decay)
    gamma = cfg.asr_gamma if cfg.asr_gamma > 0 else 1.0 / n_layers
    return SnapshotLowRankRegularizer(gamma, k=cfg.lrf_rank)


def _settings(cfg):
    return TrainSettings(
        step_size=cfg.step_size,
        epsilon=cfg.epsilon,
        patience=cfg.patience,
        max_epochs=cfg.max_epochs,
        batch_size=cfg.batch_size,
        loss=cfg.loss,
        lrf_rank=cfg.lrf_rank,
    )


def train_from_config(cfg):
    """Run the configured training; returns (net, metrics trace)."""
    cfg.validate()
    data = assemble_data(cfg)
    net = build_network(cfg, int(np.prod(data.train.inputs.shape[1:])), stream_rng(cfg.seed, STREAM_INIT))
    out_dim = net.layers[-1].out_dim if net.layers[-1].kind == "dense" else None
    if out_dim is not None and out_dim != data.train.targets.shape[1]:
        raise UsageError(
            f"model output dim {out_dim} does not match target columns {data.train.targets.shape[1]}"
        )
    regularizer = build_regularizer(cfg, len(net.layers))
    net, metrics = training.run_training(
        net,
        data,
        _settings(cfg),
        regularizer,
        stream_rng(cfg.seed, STREAM_SHUFFLE),
        stream_rng(cfg.seed, STREAM_SELECT),
    )
    return net, metrics


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_header(n_layers):
    fixed = [
        "epoch",
        "train_loss",
        "train_acc",
        "val_loss",
        "val_acc",
        "test_loss",
        "test_acc",
        "v",
        "v_window_mean",
        "sncn",
    ]
    return fixed + [f"gamma_{i}" for i in range(n_layers)] + ["selected", "substituted"]


def metrics_csv_lines(metrics):
    n_layers = len(metrics[0].gamma)
    lines = [",".join(metrics_header(n_layers))]
    for m in metrics:
        cells = [
            str(m.epoch),
            repr(m.train_loss),
            repr(m.train_acc),
            repr(m.val_loss),
            repr(m.val_acc),
            repr(m.test_loss),
            repr(m.test_acc),
            repr(m.v),
            repr(m.v_window_mean),
            repr(m.sncn),
        ]
        cells += [repr(g) for g in m.gamma]
        cells.append(";".join(str(i) for i in m.selected))
        cells.append(";".join(str(i) for i in m.substituted))
        lines.append(",".join(cells))
    return lines


def run_experiment(cfg, out_dir):
    """Train per config and write metrics.csv plus a re-runnable report."""
    net, metrics = train_from_config(cfg)
    run_dir = os.path.join(out_dir, cfg.name)
    os.makedirs(run_dir, exist_ok=True)
    metrics_path = os.path.join(run_dir, "metrics.csv")
    with open(metrics_path, "w") as fh:
        fh.write("\n".join(metrics_csv_lines(metrics)) + "\n")

    final = metrics[-1]
    report_path = os.path.join(run_dir, "report.txt")
    lines = ["[config]"]
    lines += config_echo_lines(cfg)
    lines.append("")
    lines.append("[result]")
    lines.append(f"epochs_run = {len(metrics)}")
    for key in ("train_loss", "train_acc", "val_loss", "val_acc", "test_loss", "test_acc", "v", "sncn"):
        lines.append(f"final_{key} = {_fmt(getattr(final, key))}")
    lines.append("metrics_csv = metrics.csv")
    with open(report_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return RunReport(
        config=cfg,
        final=final,
        epochs_run=len(metrics),
        metrics_path=metrics_path,
        report_path=report_path,
    )


def check_comparable(configs):
    """Comparison candidates must differ only in regularization fields."""
    if len(configs) < 2:
        raise UsageError("compare needs at least two configs")
    base = configs[0].to_mapping()
    for cfg in configs[1:]:
        other = cfg.to_mapping()
        for key, value in base.items():
            if key in _COMPARE_FIELDS:
                continue
            if other[key] != value:
                raise UsageError(
                    f"configs differ in non-regularization field {key!r} "
                    f"({value!r} vs {other[key]!r}); comparison would be unfair"
                )


def compare(configs, seeds, out_dir):
    """Run each config across seeds; emit an aligned mean/std summary table."""
    check_comparable(configs)
    seeds = list(seeds)
    if not seeds:
        raise UsageError("compare needs at least one seed")
    rows = []
    for cfg in configs:
        finals = []
        for seed in seeds:
            run_cfg = ExperimentConfig(**{**cfg.to_mapping(), "seed": seed, "name": f"{cfg.name}_s{seed}"})
            report = run_experiment(run_cfg, os.path.join(out_dir, "runs"))
            finals.append(report.final)
        row = {"name": cfg.name, "regularizer": cfg.regularizer, "damping": cfg.damping}
        for metric in ("train_acc", "train_loss", "test_acc", "test_loss"):
            values = np.array([getattr(f, metric) for f in finals], dtype=np.float64)
            row[f"{metric}_mean"] = float(np.mean(values))
            row[f"{metric}_std"] = float(np.std(values))
        rows.append(row)

    header = list(rows[0].keys())
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(row[key]) for key in header))
    os.makedirs(out_dir, exist_ok=True)
    table_path = os.path.join(out_dir, "comparison.csv")
    with open(table_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return rows, table_path


def run_checks(names, seed, out_dir):
    """Execute verification checks; write one report (and rows CSV) each.

    Returns True when no executed check reported failure (observational
    checks report no verdict and cannot fail).
    """
    os.makedirs(out_dir, exist_ok=True)
    all_ok = True
    for name in names:
        if name not in oracle.ORACLE_CHECKS:
            raise UsageError(
                f"unknown check {name!r}; choose from {tuple(oracle.ORACLE_CHECKS)}"
            )
        report = oracle.ORACLE_CHECKS[name](seed=seed)
        stem = name.replace("-", "_")
        with open(os.path.join(out_dir, f"{stem}.txt"), "w") as fh:
            fh.write("\n".join(report.summary_lines()) + "\n")
        csv_lines = report.rows_csv_lines()
        if csv_lines:
            with open(os.path.join(out_dir, f"{stem}.csv"), "w") as fh:
                fh.write("\n".join(csv_lines) + "\n")
        if report.passed is False:
            all_ok = False
    return all_ok
