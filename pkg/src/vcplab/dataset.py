"""Tabular binary-classification data: CSV ingestion, preprocessing, splits."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from math import comb
from pathlib import Path

import numpy as np

MISSING_TOKENS = frozenset({"", "nan", "NaN", "NAN"})
STD_FLOOR = 1e-12


class DataError(ValueError):
    """Malformed or unusable input data."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple = ()

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] < 1:
            raise DataError(f"features must be a non-empty 2-D matrix, got shape {X.shape}")
        y = np.asarray(self.labels)
        if y.shape != (X.shape[0],):
            raise DataError(f"labels must have length {X.shape[0]}, got shape {y.shape}")
        if not np.isin(y, (0, 1)).all():
            bad = y[~np.isin(y, (0, 1))][0]
            raise DataError(f"labels must be 0 or 1, found {bad!r}")
        names = tuple(self.feature_names) or tuple(f"x{j}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DataError(f"{len(names)} feature names for {X.shape[1]} columns")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "labels", _frozen(y.astype(np.int64)))
        object.__setattr__(self, "feature_names", names)

    @property
    def m(self) -> int:
        return self.features.shape[0]

    @property
    def n(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.m

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.feature_names)

    def with_features(self, features, feature_names=()) -> "Dataset":
        return Dataset(features, self.labels, feature_names)


def _parse_label(raw: str, lineno: int, column: str) -> int:
    try:
        value = float(raw)
    except ValueError:
        raise DataError(f"line {lineno}, column {column!r}: label {raw!r} is not numeric") from None
    if value not in (0.0, 1.0):
        raise DataError(f"line {lineno}, column {column!r}: non-binary label {raw!r}")
    return int(value)


def load_csv(path, label_column: str, missing_policy: str = "mean") -> Dataset:
    """Read a headed CSV file into a :class:`Dataset`.

    Empty cells and ``NaN`` count as missing feature values. ``missing_policy``
    is ``"drop"`` (discard incomplete rows) or ``"mean"`` (impute the column
    mean of the observed values). ``"keep"`` leaves NaN in place so a caller can
    impute later from training-split statistics (see :func:`impute_means`).
    Rows with a missing label are always dropped.
    """
    if missing_policy not in ("drop", "mean", "keep"):
        raise DataError(f"unknown missing_policy {missing_policy!r}; use 'drop', 'mean' or 'keep'")
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if label_column not in header:
            raise DataError(f"{path}: label column {label_column!r} not in header {header}")
        label_idx = header.index(label_column)
        names = [h for j, h in enumerate(header) if j != label_idx]
        rows, labels = [], []
        for lineno, record in enumerate(reader, start=2):
            if not record or all(not c.strip() for c in record):
                continue
            if len(record) != len(header):
                raise DataError(f"{path}: line {lineno} has {len(record)} fields, expected {len(header)}")
            raw_label = record[label_idx].strip()
            if raw_label in MISSING_TOKENS:
                continue
            labels.append(_parse_label(raw_label, lineno, label_column))
            values = []
            for j, cell in enumerate(record):
                if j == label_idx:
                    continue
                cell = cell.strip()
                if cell in MISSING_TOKENS:
                    values.append(math.nan)
                    continue
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}: line {lineno}, column {header[j]!r}: cannot parse {cell!r}"
                    ) from None
            rows.append(values)
    X = np.array(rows, dtype=float).reshape(len(rows), len(names))
    y = np.array(labels, dtype=np.int64)
    missing = np.isnan(X)
    if missing_policy == "drop":
        keep = ~missing.any(axis=1)
        X, y = X[keep], y[keep]
    elif missing_policy == "mean" and missing.any():
        col_means = np.nanmean(np.where(missing.all(axis=0), 0.0, X), axis=0)
        X = np.where(missing, col_means, X)
    if X.shape[0] < 2:
        raise DataError(f"{path}: fewer than 2 usable rows")
    return Dataset(X, y, tuple(names))


def impute_means(reference: Dataset, *others: Dataset) -> tuple:
    """Fill NaN cells of every dataset with the column means observed in ``reference``."""
    X = reference.features
    observed = ~np.isnan(X)
    counts = observed.sum(axis=0)
    means = np.where(counts > 0, np.where(observed, X, 0.0).sum(axis=0) / np.maximum(counts, 1), 0.0)
    out = []
    for d in (reference, *others):
        filled = np.where(np.isnan(d.features), means, d.features)
        out.append(d.with_features(filled, d.feature_names))
    return tuple(out)


@dataclass(frozen=True)
class StandardizationStats:
    means: np.ndarray
    std_devs: np.ndarray

    def apply(self, data):
        X = data.features if isinstance(data, Dataset) else np.asarray(data, dtype=float)
        Z = (X - self.means) / self.std_devs
        return data.with_features(Z, data.feature_names) if isinstance(data, Dataset) else Z

    def invert(self, Z):
        return np.asarray(Z, dtype=float) * self.std_devs + self.means


def fit_standardizer(train: Dataset) -> StandardizationStats:
    """Per-feature mean and population standard deviation (floored at 1e-12)."""
    if train.m < 2:
        raise DataError("need at least 2 rows to fit standardization")
    means = train.features.mean(axis=0)
    stds = np.maximum(train.features.std(axis=0), STD_FLOOR)
    return StandardizationStats(_frozen(means), _frozen(stds))


@dataclass(frozen=True)
class ExpansionSpec:
    degree: int
    input_dim: int
    include_bias: bool = True
    output_dim: int = field(init=False)

    def __post_init__(self):
        if self.degree < 1 or self.input_dim < 1:
            raise ValueError(f"degree and input_dim must be positive, got {self.degree}, {self.input_dim}")
        out = comb(self.input_dim + self.degree, self.degree)
        object.__setattr__(self, "output_dim", out if self.include_bias else out - 1)

    def monomials(self) -> list:
        """Exponent index tuples in graded lexicographic order.

        Each tuple lists the (0-based) feature indices multiplied together, so
        ``(0, 0, 1)`` is ``x1^2 * x2``; the empty tuple is the constant.
        """
        out = [()] if self.include_bias else []
        for k in range(1, self.degree + 1):
            out.extend(combinations_with_replacement(range(self.input_dim), k))
        return out

    def names(self, feature_names=None) -> list:
        feature_names = feature_names or [f"x{j + 1}" for j in range(self.input_dim)]
        names = []
        for mono in self.monomials():
            if not mono:
                names.append("1")
                continue
            parts = []
            for j in sorted(set(mono)):
                power = mono.count(j)
                parts.append(feature_names[j] if power == 1 else f"{feature_names[j]}^{power}")
            names.append("*".join(parts))
        return names


def expand_polynomial(x, spec: ExpansionSpec) -> np.ndarray:
    """All monomials of total degree <= ``spec.degree`` of ``x``.

    ``x`` may be one vector or a matrix with one sample per row.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != spec.input_dim:
        raise ValueError(f"expected {spec.input_dim} features, got {X.shape[1]}")
    m = X.shape[0]
    # every monomial of degree k is a degree-(k-1) monomial times its last factor
    values = {(): np.ones(m)}
    columns = []
    for mono in spec.monomials():
        if mono not in values:
            values[mono] = values[mono[:-1]] * X[:, mono[-1]]
        columns.append(values[mono])
    out = np.column_stack(columns) if columns else np.empty((m, 0))
    return out[0] if single else out


def split(dataset: Dataset, test_fraction: float, seed) -> tuple:
    """Shuffled train/test split; the train part gets ``ceil(m * (1 - f))`` rows."""
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    m = dataset.m
    n_train = math.ceil(round(m * (1.0 - test_fraction), 9))
    if n_train < 1 or n_train >= m:
        raise DataError(f"split of {m} rows with test_fraction={test_fraction} leaves an empty part")
    perm = np.random.default_rng(seed).permutation(m)
    return dataset.subset(np.sort(perm[:n_train])), dataset.subset(np.sort(perm[n_train:]))


def make_synthetic_gaussians(m: int, n: int, separation: float, seed, label_noise: float = 0.0) -> Dataset:
    """Two isotropic unit-variance Gaussian classes with means at +-separation/2 along e1.

    ``label_noise`` flips that fraction of labels (chosen uniformly, exact count).
    """
    if m < 4 or m % 2:
        raise DataError(f"m must be an even number >= 4, got {m}")
    if n < 1 or separation < 0 or not 0.0 <= label_noise < 1.0:
        raise DataError("need n >= 1, separation >= 0 and 0 <= label_noise < 1")
    rng = np.random.default_rng(seed)
    half = m // 2
    X = rng.standard_normal((m, n))
    X[:half, 0] -= separation / 2.0
    X[half:, 0] += separation / 2.0
    y = np.repeat([0, 1], half)
    n_flip = int(round(label_noise * m))
    if n_flip:
        flip = rng.choice(m, size=n_flip, replace=False)
        y[flip] = 1 - y[flip]
    return Dataset(X, y)
