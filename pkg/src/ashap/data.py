"""Dataset ingestion, partitioning, normalization and synthetic anomalies."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ashap.errors import ConstantFeatureError, DataError, ParseError, SchemaError, SizingError

REAL = "real"
BINARY = "binary"
FEATURE_KINDS = (REAL, BINARY)
LABEL_COLUMN = "label"


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Rows of a tabular dataset plus per-feature metadata.

    ``labels`` is a boolean vector where ``True`` marks an anomalous row.
    """

    rows: np.ndarray
    feature_names: tuple[str, ...]
    feature_kinds: tuple[str, ...]
    labels: np.ndarray

    def __post_init__(self):
        rows = _frozen(self.rows)
        if rows.ndim != 2 or rows.shape[1] < 1:
            raise DataError(f"rows must be a 2-D array with at least one column, got shape {rows.shape}")
        d = rows.shape[1]
        names = tuple(self.feature_names) if self.feature_names is not None else tuple(f"x{i}" for i in range(d))
        kinds = tuple(self.feature_kinds) if self.feature_kinds is not None else (REAL,) * d
        if len(names) != d or len(kinds) != d:
            raise DataError("feature_names and feature_kinds must have one entry per column")
        bad = [k for k in kinds if k not in FEATURE_KINDS]
        if bad:
            raise SchemaError(f"unknown feature kind(s): {sorted(set(bad))}")
        labels = np.zeros(len(rows), dtype=bool) if self.labels is None else np.asarray(self.labels, dtype=bool)
        if labels.shape != (len(rows),):
            raise DataError("labels must have one entry per row")
        labels = labels.copy()
        labels.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "feature_kinds", kinds)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_array(cls, rows, feature_kinds=None, labels=None, feature_names=None):
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        return cls(rows, feature_names, feature_kinds, labels)

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    def __len__(self):
        return self.rows.shape[0]

    @property
    def binary_mask(self) -> np.ndarray:
        return np.array([k == BINARY for k in self.feature_kinds])

    def subset(self, index) -> "Dataset":
        return Dataset(self.rows[index], self.feature_names, self.feature_kinds, self.labels[index])

    def with_rows(self, rows) -> "Dataset":
        return Dataset(rows, self.feature_names, self.feature_kinds, self.labels)


@dataclass(frozen=True, eq=False)
class NormStats:
    """Per-feature affine map estimated on the training partition.

    Binary features carry mean 0 and std 1 so that the map is the identity on them.
    """

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean))
        object.__setattr__(self, "std", _frozen(self.std))

    def apply(self, rows):
        return (np.asarray(rows, dtype=float) - self.mean) / self.std

    def invert(self, rows):
        return np.asarray(rows, dtype=float) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, obj):
        return cls(np.asarray(obj["mean"], dtype=float), np.asarray(obj["std"], dtype=float))


@dataclass(frozen=True, eq=False)
class DataSplits:
    train: Dataset
    valid: Dataset
    test_norm: Dataset
    test_anom: Dataset
    norm_stats: NormStats | None = None
    # row indices into the source dataset, one array per partition
    source_index: Mapping[str, np.ndarray] = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.train.d

    def partitions(self):
        return {"train": self.train, "valid": self.valid, "test_norm": self.test_norm, "test_anom": self.test_anom}


@dataclass(frozen=True, eq=False)
class PerturbationRecord:
    base_row_index: int
    perturbed_indices: frozenset
    perturbed_point: np.ndarray
    delta: np.ndarray

    @property
    def truth(self) -> list[int]:
        return sorted(self.perturbed_indices)


def read_schema(path) -> dict[str, str]:
    """Read a ``name,kind`` sidecar file into an ordered mapping."""
    schema = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or not "".join(rec).strip() or rec[0].lstrip().startswith("#"):
                continue
            if len(rec) != 2:
                raise ParseError("schema lines must be 'name,kind'", line=lineno)
            name, kind = rec[0].strip(), rec[1].strip().lower()
            if lineno == 1 and (name, kind) == ("name", "kind"):
                continue
            if kind not in FEATURE_KINDS:
                raise SchemaError(f"line {lineno}: kind must be one of {FEATURE_KINDS}, got {kind!r}")
            schema[name] = kind
    return schema


def load_csv(path, schema=None, require_label=True) -> Dataset:
    """Parse a comma-separated file with one header row.

    Args:
        path: CSV file. Every column except ``label`` is a numeric feature.
        schema: ``None`` (all features real), a mapping ``name -> kind``, a
            sequence of kinds in column order, or a path to a ``name,kind``
            sidecar file.
        require_label: raise if the ``label`` column is absent. When it is
            absent and not required, every row is labeled normal.

    Raises:
        ParseError: on a malformed row; the message names the line number.
        SchemaError: when a binary feature holds a value other than 0 or 1.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such data file: {path}")
    if isinstance(schema, (str, Path)):
        schema = read_schema(schema)

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        if LABEL_COLUMN in header:
            label_col = header.index(LABEL_COLUMN)
        elif require_label:
            raise ParseError(f"missing '{LABEL_COLUMN}' column", line=1)
        else:
            label_col = None
        feat_cols = [i for i in range(len(header)) if i != label_col]
        names = [header[i] for i in feat_cols]
        if not names:
            raise ParseError("no feature columns", line=1)

        rows, labels = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or not "".join(rec).strip():
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(rec)}", line=lineno)
            try:
                rows.append([float(rec[i]) for i in feat_cols])
            except ValueError as exc:
                raise ParseError(f"non-numeric value ({exc})", line=lineno) from None
            if not np.all(np.isfinite(rows[-1])):
                raise ParseError("non-finite value", line=lineno)
            if label_col is not None:
                lab = rec[label_col].strip()
                if lab not in ("0", "1"):
                    raise ParseError(f"label must be 0 or 1, got {lab!r}", line=lineno)
                labels.append(lab == "1")
            else:
                labels.append(False)

    if not rows:
        raise ParseError("no data rows", line=2)
    kinds = _resolve_kinds(schema, names)
    data = np.asarray(rows, dtype=float)
    for j, kind in enumerate(kinds):
        if kind == BINARY and not np.all((data[:, j] == 0) | (data[:, j] == 1)):
            bad = np.flatnonzero((data[:, j] != 0) & (data[:, j] != 1))[0]
            raise SchemaError(
                f"binary feature {names[j]!r} has value {data[bad, j]!r} on line {bad + 2}"
            )
    return Dataset(data, tuple(names), tuple(kinds), np.asarray(labels, dtype=bool))


def _resolve_kinds(schema, names):
    if schema is None:
        return [REAL] * len(names)
    if isinstance(schema, Mapping):
        missing = [n for n in names if n not in schema]
        if missing:
            raise SchemaError(f"schema has no entry for feature(s): {missing}")
        return [schema[n] for n in names]
    kinds = list(schema)
    if len(kinds) != len(names):
        raise SchemaError(f"schema lists {len(kinds)} kinds for {len(names)} features")
    for k in kinds:
        if k not in FEATURE_KINDS:
            raise SchemaError(f"unknown feature kind {k!r}")
    return kinds


def split(data: Dataset, valid_fraction: float = 0.2, seed: int = 0) -> DataSplits:
    """Partition into train / valid / test-normal / test-anomalous.

    All anomalous rows form ``test_anom``; an equally sized random sample of
    normal rows forms ``test_norm``; the remaining normal rows are divided into
    train and valid, the latter getting ``round(valid_fraction * n_rest)`` rows.
    """
    if not 0.0 <= valid_fraction < 1.0:
        raise ValueError("valid_fraction must lie in [0, 1)")
    normal = np.flatnonzero(~data.labels)
    anom = np.flatnonzero(data.labels)
    if len(anom) < 2 or len(normal) < 3 * len(anom):
        raise SizingError(
            f"need at least 2 anomalous rows and 3x as many normal rows; "
            f"got {len(anom)} anomalous and {len(normal)} normal"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(normal)
    test_norm = np.sort(perm[: len(anom)])
    rest = perm[len(anom):]
    n_valid = int(round(valid_fraction * len(rest)))
    valid = np.sort(rest[:n_valid])
    train = np.sort(rest[n_valid:])
    index = {"train": train, "valid": valid, "test_norm": test_norm, "test_anom": anom}
    for v in index.values():
        v.setflags(write=False)
    return DataSplits(
        data.subset(train), data.subset(valid), data.subset(test_norm), data.subset(anom),
        source_index=index,
    )


def split_normal(data: Dataset, test_size: int, valid_fraction: float = 0.2, seed: int = 0) -> DataSplits:
    """Partition an all-normal dataset (e.g. generated data); ``test_anom`` is empty."""
    if data.labels.any():
        raise DataError("split_normal expects normal rows only; use split()")
    if not 1 <= test_size < len(data) - 1:
        raise SizingError(f"test_size must lie in [1, {len(data) - 2}], got {test_size}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(data))
    test_norm = np.sort(perm[:test_size])
    rest = perm[test_size:]
    n_valid = int(round(valid_fraction * len(rest)))
    valid = np.sort(rest[:n_valid])
    train = np.sort(rest[n_valid:])
    empty = np.zeros(0, dtype=int)
    return DataSplits(
        data.subset(train), data.subset(valid), data.subset(test_norm), data.subset(empty),
        source_index={"train": train, "valid": valid, "test_norm": test_norm, "test_anom": empty},
    )


def fit_norm_stats(train: Dataset) -> NormStats:
    """Train mean and population std for real features; identity for binary ones.

    Raises:
        ConstantFeatureError: when a real feature has zero spread in ``train``.
    """
    binary = train.binary_mask
    mean = train.rows.mean(axis=0)
    std = train.rows.std(axis=0)
    constant = [train.feature_names[j] for j in range(train.d) if not binary[j] and not std[j] > 0]
    if constant:
        raise ConstantFeatureError(constant)
    mean = np.where(binary, 0.0, mean)
    std = np.where(binary, 1.0, std)
    return NormStats(mean, std)


def normalize(splits: DataSplits) -> DataSplits:
    """Z-score real features of every partition with train statistics."""
    if splits.norm_stats is not None:
        raise DataError("splits are already normalized")
    stats = fit_norm_stats(splits.train)
    parts = {k: v.with_rows(stats.apply(v.rows)) for k, v in splits.partitions().items()}
    return replace(splits, norm_stats=stats, **parts)


def denormalize(splits: DataSplits) -> DataSplits:
    if splits.norm_stats is None:
        raise DataError("splits are not normalized")
    stats = splits.norm_stats
    parts = {k: v.with_rows(stats.invert(v.rows)) for k, v in splits.partitions().items()}
    return replace(splits, norm_stats=None, **parts)


def inject_anomaly(row, d_anom: int, kinds: Sequence[str] | None = None, seed=None,
                   base_row_index: int = -1) -> PerturbationRecord:
    """Perturb ``d_anom`` distinct, uniformly chosen coordinates of ``row``.

    Real coordinates are shifted by ``sign * u`` with an equiprobable sign and
    ``u ~ Uniform[1, 2]``; binary coordinates are flipped.
    """
    row = np.asarray(row, dtype=float)
    d = row.shape[0]
    if kinds is None:
        kinds = (REAL,) * d
    if len(kinds) != d:
        raise ValueError("kinds must have one entry per coordinate")
    if not 1 <= d_anom <= d:
        raise ValueError(f"d_anom must lie in [1, {d}], got {d_anom}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = rng.choice(d, size=d_anom, replace=False)
    sign = rng.choice((-1.0, 1.0), size=d_anom)
    mag = rng.uniform(1.0, 2.0, size=d_anom)
    point = row.copy()
    for j, s, u in zip(idx, sign, mag):
        if kinds[j] == BINARY:
            point[j] = 1.0 - point[j]
        else:
            point[j] = row[j] + s * u
    point.setflags(write=False)
    delta = point - row
    delta.setflags(write=False)
    return PerturbationRecord(int(base_row_index), frozenset(int(i) for i in idx), point, delta)


def generate_synthetic_gaussian(d: int, correlation: float, n: int, seed=None) -> Dataset:
    """Draw ``n`` normal-labeled rows from an equicorrelated standard Gaussian."""
    if d < 2:
        raise ValueError("d must be at least 2")
    if not abs(correlation) < 1:
        raise ValueError("|correlation| must be < 1")
    if correlation <= -1.0 / (d - 1):
        raise ValueError(
            f"correlation {correlation} gives a non-positive-definite covariance for d={d}; "
            f"need > {-1.0 / (d - 1):.6g}"
        )
    cov = np.full((d, d), float(correlation))
    np.fill_diagonal(cov, 1.0)
    chol = np.linalg.cholesky(cov)
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((n, d)) @ chol.T
    return Dataset(rows, tuple(f"x{i + 1}" for i in range(d)), (REAL,) * d, np.zeros(n, dtype=bool))


def concat_normal_anomalous(normal: Dataset, anomalous_rows) -> Dataset:
    """Stack extra anomalous-labeled rows under a normal dataset."""
    extra = np.atleast_2d(np.asarray(anomalous_rows, dtype=float))
    rows = np.vstack([normal.rows, extra])
    labels = np.concatenate([normal.labels, np.ones(len(extra), dtype=bool)])
    return Dataset(rows, normal.feature_names, normal.feature_kinds, labels)
