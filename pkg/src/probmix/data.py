"""Datasets: the two synthetic toy problems, CSV ingestion, splits and standardization."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np


class CsvFormatError(ValueError):
    """Malformed table; ``row`` and ``column`` are 1-based file coordinates."""

    def __init__(self, message: str, row: int | None = None, column: int | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


class RaggedRowError(CsvFormatError):
    pass


class NonNumericCellError(CsvFormatError):
    pass


class MissingColumnError(CsvFormatError):
    pass


@dataclass(frozen=True)
class Standardizer:
    """Per-column affine statistics fitted on a training split."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray | None = None
    y_std: np.ndarray | None = None
    constant_columns: tuple = ()

    def transform(self, ds: "Dataset") -> "Dataset":
        x = (ds.x - self.x_mean) / self.x_std
        y = ds.y
        if self.y_mean is not None:
            y = (ds.y - self.y_mean) / self.y_std
        return replace(ds, x=x, y=y, stats=self)

    def inverse(self, ds: "Dataset") -> "Dataset":
        x = ds.x * self.x_std + self.x_mean
        y = ds.y
        if self.y_mean is not None:
            y = ds.y * self.y_std + self.y_mean
        return replace(ds, x=x, y=y, stats=None)

    @property
    def log_y_scale(self) -> float:
        """Additive NLL correction from standardized to raw target units."""
        return 0.0 if self.y_std is None else float(np.sum(np.log(self.y_std)))


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray  # (n, d_x)
    y: np.ndarray  # (n, d_y) float, or (n,) int class indices
    task: str = "regression"
    stats: Standardizer | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if self.task == "classification":
            y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        elif self.task == "regression":
            y = np.asarray(self.y, dtype=np.float64)
            if y.ndim == 1:
                y = y[:, None]
        else:
            raise ValueError(f"unknown task {self.task!r}")
        if len(x) != len(y):
            raise ValueError("features and targets differ in length")
        if np.isnan(x).any() or (self.task == "regression" and np.isnan(y).any()):
            raise ValueError("dataset contains NaN")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return len(self.x)

    def subset(self, index) -> "Dataset":
        return replace(self, x=self.x[index], y=self.y[index])

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1 if self.task == "classification" else 0


# -- synthetic generators ---------------------------------------------------------

def gen_toy_regression(n_train: int = 100, n_test: int = 100, seed: int = 0,
                       noise_var: float = 9.0):
    """``y = x**3 + eps``; train ``x ~ U(-4, 4)``, out-of-distribution test ``x ~ U(4, 6)``."""
    if n_train < 1 or n_test < 1:
        raise ValueError("need at least one train and one test sample")
    rng = np.random.default_rng(seed)
    noise_sd = np.sqrt(noise_var)
    x_tr = rng.uniform(-4.0, 4.0, size=n_train)
    y_tr = x_tr ** 3 + noise_sd * rng.standard_normal(n_train)
    x_te = rng.uniform(4.0, 6.0, size=n_test)
    y_te = x_te ** 3 + noise_sd * rng.standard_normal(n_test)
    return Dataset(x_tr, y_tr), Dataset(x_te, y_te)


RING_RADII = (0.5, 1.5, 2.5)


def gen_toy_rings(n: int = 100, seed: int = 0, noise_var: float = 0.09,
                  radii: Sequence[float] = RING_RADII) -> Dataset:
    """Three noisy concentric rings; class sizes differ by at most one."""
    if n < 3:
        raise ValueError("need n >= 3")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % len(radii))
    omega = rng.uniform(0.0, 2.0 * np.pi, size=n)
    r = np.asarray(radii)[labels]
    x = np.stack([r * np.cos(omega), r * np.sin(omega)], axis=1)
    x = x + np.sqrt(noise_var) * rng.standard_normal((n, 2))
    return Dataset(x, labels, task="classification")


# -- CSV -----------------------------------------------------------------------------

def load_csv(path, target_columns: Sequence = (-1,), has_header: bool = True,
             task: str = "regression") -> Dataset:
    """Read a numeric comma-separated table.

    ``target_columns`` holds column names (with a header) or integer positions;
    negative positions count from the end.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise CsvFormatError(f"{path}: empty file")
    header = None
    first_data_row = 1
    if has_header:
        header = [h.strip() for h in rows[0]]
        rows = rows[1:]
        first_data_row = 2
    width = len(header) if header is not None else len(rows[0]) if rows else 0
    values = np.empty((len(rows), width))
    for r, row in enumerate(rows):
        line = r + first_data_row
        if len(row) != width:
            raise RaggedRowError(f"{path}: row {line} has {len(row)} cells, expected {width}", line)
        for c, cell in enumerate(row):
            try:
                values[r, c] = float(cell)
            except ValueError:
                raise NonNumericCellError(f"{path}: non-numeric cell {cell!r} at ({line},{c + 1})",
                                          line, c + 1) from None
    targets = []
    for t in target_columns:
        if isinstance(t, str) and not t.lstrip("-").isdigit():
            if header is None or t not in header:
                raise MissingColumnError(f"{path}: no target column named {t!r}")
            targets.append(header.index(t))
        else:
            idx = int(t)
            if not -width <= idx < width:
                raise MissingColumnError(f"{path}: target column {idx} out of range", column=idx)
            targets.append(idx % width)
    feats = [c for c in range(width) if c not in targets]
    y = values[:, targets]
    if task == "classification":
        y = y[:, 0]
    return Dataset(values[:, feats], y, task=task)


def save_csv(ds: Dataset, path, header: bool = True) -> None:
    """Features first, targets last; ``repr`` floats so reloading is bit-exact."""
    y = ds.y[:, None] if ds.y.ndim == 1 else ds.y
    cols = [f"x{k}" for k in range(ds.x.shape[1])] + [f"y{k}" for k in range(y.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(cols)
        for xr, yr in zip(ds.x, y):
            w.writerow([repr(float(v)) for v in xr] + [str(int(v)) if ds.task == "classification"
                                                       else repr(float(v)) for v in yr])


# -- splitting and scaling ------------------------------------------------------

def split(ds: Dataset, fractions: Sequence[float], seed: int = 0) -> tuple:
    """Seeded shuffle, then consecutive blocks of ``round(f * n)`` samples.

    If the fractions sum to one the last block absorbs rounding; otherwise the
    remainder forms a final block.
    """
    fractions = [float(f) for f in fractions]
    if any(f <= 0 for f in fractions) or sum(fractions) > 1.0 + 1e-12:
        raise ValueError("fractions must be positive and sum to at most 1")
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    sizes = [int(round(f * n)) for f in fractions]
    if abs(sum(fractions) - 1.0) <= 1e-12:
        sizes[-1] = n - sum(sizes[:-1])
    else:
        sizes.append(n - sum(sizes))
    parts, start = [], 0
    for size in sizes:
        if size <= 0:
            raise ValueError("split produced an empty part")
        parts.append(ds.subset(perm[start:start + size]))
        start += size
    return tuple(parts)


def fit_standardizer(train: Dataset, targets: bool = True) -> Standardizer:
    if len(train) == 0:
        raise ValueError("cannot standardize on an empty split")
    x_mean, x_std = train.x.mean(axis=0), train.x.std(axis=0)
    constant = tuple(int(c) for c in np.flatnonzero(x_std == 0))
    if constant:
        warnings.warn(f"constant feature columns left unscaled: {constant}", stacklevel=2)
        x_mean, x_std = x_mean.copy(), x_std.copy()
        x_mean[list(constant)] = 0.0
        x_std[list(constant)] = 1.0
    y_mean = y_std = None
    if targets and train.task == "regression":
        y_mean, y_std = train.y.mean(axis=0), train.y.std(axis=0)
        y_std = np.where(y_std == 0, 1.0, y_std)
    return Standardizer(x_mean, x_std, y_mean, y_std, constant)


def standardize(train: Dataset, *others: Dataset, targets: bool = True):
    """Fit on ``train`` only and apply to every split.

    Returns ``(train_std, *others_std, stats)``.
    """
    stats = fit_standardizer(train, targets)
    return (stats.transform(train), *(stats.transform(o) for o in others), stats)
