"""Synthetic dataset generation and CSV IO.

All generators are deterministic in their seed.  CSV files carry a header of
x-prefixed feature columns followed by y-prefixed target columns; floats are
written with repr so a read-back reproduces the generated arrays bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


class DatasetError(ValueError):
    """Malformed dataset file or invalid generation parameters."""


@dataclass
class DatasetSplits:
    train: tuple
    val: tuple
    test: tuple

    def splits(self):
        return {"train": self.train, "val": self.val, "test": self.test}


# Cluster means and spreads for the three-class, four-feature flower-like
# generator.  Values chosen so the classes overlap slightly on two features.
_IRISH_MEANS = np.array(
    [
        [5.0, 3.4, 1.5, 0.25],
        [5.9, 2.8, 4.3, 1.3],
        [6.6, 3.0, 5.6, 2.0],
    ]
)
_IRISH_STD = np.array([0.35, 0.30, 0.30, 0.20])


def _split_sizes(params, defaults):
    sizes = []
    for key, default in defaults:
        n = int(params.get(key, default))
        if n < 1:
            raise DatasetError(f"{key} must be >= 1, got {n}")
        sizes.append(n)
    return sizes


def gen_gaussian_regression(
    seed, dim=20, targets=1, train_n=1000, val_n=200, test_n=200,
    input_std=1.0, teacher_std=1.0, noise_std=0.1,
):
    """Linear teacher with Gaussian inputs: y = W x + noise."""
    rng = np.random.default_rng(seed)
    w = teacher_std * rng.normal(size=(targets, dim))
    out = []
    for n in (train_n, val_n, test_n):
        x = rng.normal(0.0, input_std, size=(n, dim))
        y = x @ w.T + noise_std * rng.normal(size=(n, targets))
        out.append((x, y))
    return DatasetSplits(*out)


def gen_separable_classification(
    seed, classes=3, dim=8, train_n=60, val_n=30, test_n=120, spread=0.15, noise=0.0,
):
    """One-hot classification around well-separated random prototypes.

    `spread` is the within-class standard deviation on every split; `noise`
    is extra feature noise applied to the training split only.
    """
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(dim, classes))
    # orthonormalize prototype directions (Gram-Schmidt)
    protos = np.zeros((classes, dim))
    for c in range(classes):
        vec = g[:, c]
        for j in range(c):
            vec = vec - (vec @ protos[j]) * protos[j]
        protos[c] = vec / np.linalg.norm(vec)
    out = []
    for i, n in enumerate((train_n, val_n, test_n)):
        labels = rng.integers(0, classes, size=n)
        x = protos[labels] + spread * rng.normal(size=(n, dim))
        if i == 0 and noise > 0:
            x = x + noise * rng.normal(size=x.shape)
        y = np.eye(classes)[labels]
        out.append((x, y))
    return DatasetSplits(*out)


def gen_noisy_iris_like(seed, noise=0.0, train_n=60, val_n=30, test_n=120):
    """Three flower-like clusters in four features, with optional feature
    noise injected into the training split to provoke overfitting."""
    rng = np.random.default_rng(seed)
    out = []
    for i, n in enumerate((train_n, val_n, test_n)):
        labels = rng.integers(0, 3, size=n)
        x = _IRISH_MEANS[labels] + _IRISH_STD * rng.normal(size=(n, 4))
        if i == 0 and noise > 0:
            x = x + noise * rng.normal(size=x.shape)
        y = np.eye(3)[labels]
        out.append((x, y))
    return DatasetSplits(*out)


DATASET_KINDS = ("gaussian-regression", "separable-classification", "noisy-iris-like")


def generate(kind, seed, **params):
    """Dispatch to a generator by kind name; unknown kinds are usage errors."""
    if kind == "gaussian-regression":
        return gen_gaussian_regression(seed, **params)
    if kind == "separable-classification":
        return gen_separable_classification(seed, **params)
    if kind == "noisy-iris-like":
        return gen_noisy_iris_like(seed, **params)
    raise DatasetError(f"unknown dataset kind {kind!r}; choose from {DATASET_KINDS}")


def write_split(path, x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    header = [f"x{i}" for i in range(x.shape[1])] + [f"y{i}" for i in range(y.shape[1])]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for xi, yi in zip(x, y):
            writer.writerow([repr(float(v)) for v in xi] + [repr(float(v)) for v in yi])


def write_dataset(splits, out_dir, name):
    """Write train/val/test CSVs; returns the three paths."""
    import os

    paths = []
    for split, (x, y) in splits.splits().items():
        path = os.path.join(out_dir, f"{name}_{split}.csv")
        write_split(path, x, y)
        paths.append(path)
    return paths


def load_csv(path, n_targets=None):
    """Parse one dataset CSV into raw (features, targets) arrays.

    Target columns are the y-prefixed header names, unless n_targets pins the
    last n columns explicitly.  Ragged rows, non-numeric cells and empty files
    raise DatasetError with the offending line number.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError(f"{path}: empty file")
        width = len(header)
        if n_targets is None:
            target_cols = [i for i, h in enumerate(header) if h.strip().startswith("y")]
            if not target_cols or len(target_cols) == width:
                raise DatasetError(
                    f"{path}: cannot infer target columns from header {header}; pass n_targets"
                )
        else:
            if not 1 <= n_targets < width:
                raise DatasetError(f"{path}: n_targets={n_targets} out of range for {width} columns")
            target_cols = list(range(width - n_targets, width))
        feature_cols = [i for i in range(width) if i not in target_cols]

        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width:
                raise DatasetError(
                    f"{path}:{lineno}: expected {width} columns, got {len(row)}"
                )
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                bad = next(c for c in row if not _is_float(c))
                raise DatasetError(f"{path}:{lineno}: non-numeric cell {bad!r}") from None
        if not rows:
            raise DatasetError(f"{path}: no data rows")
    data = np.array(rows, dtype=np.float64)
    return data[:, feature_cols], data[:, target_cols]


def _is_float(cell):
    try:
        float(cell)
        return True
    except ValueError:
        return False


def load_dataset(data_dir, name, n_targets=None):
    import os

    parts = []
    for split in ("train", "val", "test"):
        parts.append(load_csv(os.path.join(data_dir, f"{name}_{split}.csv"), n_targets))
    return DatasetSplits(*parts)


def normalize_splits(splits):
    """Standardize features to zero mean, unit variance using train statistics.

    Targets pass through untouched.  Constant features keep their (zeroed)
    values instead of dividing by zero.
    """
    train_x = splits.train[0]
    mean = train_x.mean(axis=0)
    std = train_x.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    out = []
    for x, y in (splits.train, splits.val, splits.test):
        out.append(((x - mean) / std, y))
    return DatasetSplits(*out)
