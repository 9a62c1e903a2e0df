"""Tabular tasks: synthetic generation, CSV loading, splits and scaling."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .errors import ConfigurationError, DegenerateColumnError, ParseError
from .seeding import derive_rng

TaskKind = Literal["classification", "regression"]
SYNTHETIC_WEIGHTS = np.array([2.0, -1.0, 1.0])


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    feature_names: tuple[str, ...]
    target_name: str
    task_kind: TaskKind
    group_ids: np.ndarray | None = None
    categorical_mask: np.ndarray | None = None
    dataset_id: str = "dataset"

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.targets, dtype=float)
        if X.ndim != 2:
            raise ValueError("features must be a 2-d matrix")
        n, d = X.shape
        if d < 1:
            raise ValueError("need at least one feature")
        if y.shape != (n,):
            raise ValueError(f"targets must have length {n}, got shape {y.shape}")
        names = tuple(self.feature_names)
        if len(names) != d or len(set(names)) != d:
            raise ValueError("feature_names must be d unique strings")
        if self.task_kind not in ("classification", "regression"):
            raise ValueError(f"unknown task kind {self.task_kind!r}")
        if self.task_kind == "classification" and not np.all(np.isin(y, (0.0, 1.0))):
            raise ValueError("classification targets must be 0 or 1")
        mask = np.zeros(d, bool) if self.categorical_mask is None else np.asarray(self.categorical_mask, bool)
        if mask.shape != (d,):
            raise ValueError("categorical_mask must have one entry per feature")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "targets", _frozen(y))
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "categorical_mask", _frozen(mask))
        if self.group_ids is not None:
            g = np.asarray(self.group_ids)
            if g.shape != (n,):
                raise ValueError("group_ids must have length n")
            object.__setattr__(self, "group_ids", _frozen(g))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        return replace(
            self,
            features=self.features[idx] if idx.size else np.empty((0, self.d)),
            targets=self.targets[idx],
            group_ids=None if self.group_ids is None else self.group_ids[idx],
        )


@dataclass(frozen=True)
class Fold:
    train_indices: tuple[int, ...]
    test_indices: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "train_indices", tuple(int(i) for i in self.train_indices))
        object.__setattr__(self, "test_indices", tuple(int(i) for i in self.test_indices))
        if set(self.train_indices) & set(self.test_indices):
            raise ValueError("train and test indices overlap")


def synthetic_feature_names(d: int = 3) -> tuple[str, ...]:
    return tuple(f"feature {i}" for i in range(d))


def generate_synthetic(n: int, noise_sd: float = 0.05, seed: int = 0) -> Dataset:
    """Draw the y = 2*x1 - x2 + x3 + eps task; ``noise_sd`` is a standard deviation."""
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    if not noise_sd >= 0:
        raise ValueError(f"noise_sd must be non-negative, got {noise_sd!r}")
    rng = derive_rng(seed, 0)
    X = rng.standard_normal((int(n), 3))
    y = X @ SYNTHETIC_WEIGHTS + noise_sd * rng.standard_normal(int(n))
    return Dataset(X, y, synthetic_feature_names(3), "target", "regression", dataset_id="synthetic")


def _split_count(n: int, test_fraction: float) -> int:
    # floor: any remainder stays on the training side
    return int(math.floor(n * test_fraction + 1e-9))


def make_folds(
    dataset: Dataset,
    n_folds: int,
    test_fraction: float = 0.5,
    strategy: Literal["stratified", "grouped", "plain"] = "plain",
    seed: int = 0,
) -> list[Fold]:
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    if strategy == "grouped" and dataset.group_ids is None:
        raise ConfigurationError("grouped splits need group_ids on the dataset")
    if strategy == "stratified" and dataset.task_kind != "classification":
        raise ConfigurationError("stratified splits need a classification task")
    if strategy not in ("stratified", "grouped", "plain"):
        raise ConfigurationError(f"unknown split strategy {strategy!r}")
    folds = []
    for f in range(n_folds):
        rng = derive_rng(seed, f)
        if strategy == "plain":
            perm = rng.permutation(dataset.n)
            k = _split_count(dataset.n, test_fraction)
            test, train = perm[:k], perm[k:]
        elif strategy == "stratified":
            test_parts, train_parts = [], []
            for c in (0.0, 1.0):
                members = rng.permutation(np.flatnonzero(dataset.targets == c))
                k = _split_count(members.size, test_fraction)
                test_parts.append(members[:k])
                train_parts.append(members[k:])
            test = np.concatenate(test_parts)
            train = np.concatenate(train_parts)
        else:
            test, train = _grouped_split(dataset.group_ids, test_fraction, rng)
        folds.append(Fold(tuple(np.sort(train)), tuple(np.sort(test)), seed=seed))
    return folds


def _grouped_split(groups: np.ndarray, test_fraction: float, rng: np.random.Generator):
    uniq, inverse = np.unique(groups, return_inverse=True)
    if uniq.size < 2:
        raise ConfigurationError("grouped splits need at least two distinct groups")
    sizes = np.bincount(inverse)
    target = _split_count(groups.size, test_fraction)
    in_test = np.zeros(uniq.size, bool)
    count = 0
    for g in rng.permutation(uniq.size):
        if count + sizes[g] <= target:
            in_test[g] = True
            count += sizes[g]
    if not in_test.any():
        in_test[int(np.argmin(sizes))] = True
    if in_test.all():
        in_test[int(np.argmax(sizes))] = False
    mask = in_test[inverse]
    return np.flatnonzero(mask), np.flatnonzero(~mask)


def normalize(train: Dataset, test: Dataset) -> tuple[Dataset, Dataset]:
    """Z-score non-categorical columns with training statistics (population sd)."""
    if train.feature_names != test.feature_names:
        raise ValueError("train and test must share feature names")
    mask = train.categorical_mask
    mean = np.zeros(train.d)
    sd = np.ones(train.d)
    for j in range(train.d):
        if mask[j]:
            continue
        col = train.features[:, j]
        mean[j] = col.mean()
        sd[j] = col.std()
        if not sd[j] > 0:
            raise DegenerateColumnError(train.feature_names[j])
    return (
        replace(train, features=(train.features - mean) / sd),
        replace(test, features=(test.features - mean) / sd),
    )


def subsample_train(fold: Fold, m: int, seed: int = 0) -> Fold:
    if m < 0 or m > len(fold.train_indices):
        raise ValueError(f"cannot draw {m} training points from {len(fold.train_indices)}")
    rng = derive_rng(seed, m)
    chosen = rng.choice(np.asarray(fold.train_indices, dtype=int), size=m, replace=False)
    return Fold(tuple(chosen), fold.test_indices, seed=seed)


@dataclass(frozen=True)
class CsvSchema:
    target: str
    task_kind: TaskKind
    categorical: tuple[str, ...] = ()
    group: str | None = None
    features: tuple[str, ...] | None = None
    dataset_id: str | None = None


def load_csv(path: str | Path, schema: CsvSchema) -> Dataset:
    path = Path(path)
    if schema.task_kind not in ("classification", "regression"):
        raise ParseError(f"unknown task kind {schema.task_kind!r}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", row=0) from None
        rows = list(reader)
    for col in [schema.target, *schema.categorical, *([schema.group] if schema.group else [])]:
        if col not in header:
            raise ParseError(f"missing column {col!r}", row=0, column=col)
    if schema.features is not None:
        names = list(schema.features)
        for col in names:
            if col not in header:
                raise ParseError(f"missing column {col!r}", row=0, column=col)
    else:
        names = [h for h in header if h not in (schema.target, schema.group)]
    col_idx = {h: i for i, h in enumerate(header)}
    X = np.empty((len(rows), len(names)))
    y = np.empty(len(rows))
    groups = [] if schema.group else None
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} cells, found {len(row)}", row=r)
        for j, name in enumerate(names):
            X[r - 1, j] = _cell(row[col_idx[name]], r, name)
        y[r - 1] = _cell(row[col_idx[schema.target]], r, schema.target)
        if schema.task_kind == "classification" and y[r - 1] not in (0.0, 1.0):
            raise ParseError("classification target must be 0 or 1", row=r, column=schema.target)
        if groups is not None:
            cell = row[col_idx[schema.group]].strip()
            if cell == "":
                raise ParseError("missing value", row=r, column=schema.group)
            groups.append(cell)
    return Dataset(
        X,
        y,
        tuple(names),
        schema.target,
        schema.task_kind,
        group_ids=None if groups is None else np.array(groups),
        categorical_mask=np.array([n in schema.categorical for n in names]),
        dataset_id=schema.dataset_id or path.stem,
    )


def _cell(text: str, row: int, column: str) -> float:
    text = text.strip()
    if text == "":
        raise ParseError("missing value", row=row, column=column)
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"non-numeric cell {text!r}", row=row, column=column) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite cell {text!r}", row=row, column=column)
    return value


def write_csv(dataset: Dataset, path: str | Path) -> None:
    """Write with ``repr`` floats so that :func:`load_csv` round-trips exactly."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        extra = ["group"] if dataset.group_ids is not None else []
        w.writerow([*dataset.feature_names, dataset.target_name, *extra])
        for i in range(dataset.n):
            cells = [repr(float(v)) for v in dataset.features[i]]
            target = dataset.targets[i]
            cells.append(str(int(target)) if dataset.task_kind == "classification" else repr(float(target)))
            if extra:
                cells.append(str(dataset.group_ids[i]))
            w.writerow(cells)
