"""Typed dataset container, validation, and CSV ingestion for (X, A, Y) data.

A dataset holds n observations of covariates X (continuous, categorical, or
ordinal columns), a binary treatment indicator A, and a numeric outcome Y.
Categorical and ordinal cells are stored as integer codes into the declared
level lists. Datasets are immutable after construction and safe to share
across threads.
"""

from __future__ import annotations

import array
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Union

import numpy as np

logger = logging.getLogger(__name__)

MISSING_TOKENS = frozenset({"", "NA", "NaN", "nan"})


class DataError(ValueError):
    """Raised for malformed input data (bad cells, bad schema, bad treatment)."""


@dataclass(frozen=True)
class Continuous:
    """Real-valued covariate."""


@dataclass(frozen=True)
class Categorical:
    """Unordered covariate with a fixed set of levels."""

    levels: tuple[str, ...]

    def __post_init__(self):
        _check_levels(self.levels)


@dataclass(frozen=True)
class Ordinal:
    """Ordered covariate; the level tuple fixes the ordering."""

    levels: tuple[str, ...]

    def __post_init__(self):
        _check_levels(self.levels)


CovariateKind = Union[Continuous, Categorical, Ordinal]


def _check_levels(levels: tuple[str, ...]) -> None:
    if len(levels) == 0:
        raise DataError("level list must be non-empty")
    if len(set(levels)) != len(levels):
        raise DataError(f"duplicate levels in {levels!r}")


@dataclass(frozen=True)
class Schema:
    """Column layout of a dataset: covariates plus treatment and outcome names."""

    columns: tuple[tuple[str, CovariateKind], ...]
    treatment: str
    outcome: str

    def __post_init__(self):
        names = [name for name, _ in self.columns]
        all_names = names + [self.treatment, self.outcome]
        if len(set(all_names)) != len(all_names):
            raise DataError("column names must be unique and distinct from treatment/outcome")

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.columns)

    def kind_of(self, name: str) -> CovariateKind:
        for col, kind in self.columns:
            if col == name:
                return kind
        raise KeyError(f"unknown covariate {name!r}")

    def column_index(self, name: str) -> int:
        for i, (col, _) in enumerate(self.columns):
            if col == name:
                return i
        raise KeyError(f"unknown covariate {name!r}")


class Dataset:
    """Immutable table of n observations with typed covariates.

    Continuous columns are stored as float64 arrays; categorical and ordinal
    columns as integer code arrays indexing their level list.
    """

    def __init__(
        self,
        schema: Schema,
        covariates: dict[str, np.ndarray],
        treatment: np.ndarray,
        outcome: np.ndarray,
    ):
        self.schema = schema
        treatment = np.asarray(treatment)
        outcome = np.asarray(outcome, dtype=np.float64)
        n = len(treatment)
        if len(outcome) != n:
            raise DataError("treatment and outcome lengths differ")
        if not np.isin(treatment, (0, 1)).all():
            raise DataError("invalid treatment: values must be 0 or 1")
        if not np.isfinite(outcome).all():
            raise DataError("outcome values must be finite")
        cols: dict[str, np.ndarray] = {}
        for name, kind in schema.columns:
            if name not in covariates:
                raise DataError(f"missing covariate column {name!r}")
            arr = np.asarray(covariates[name])
            if len(arr) != n:
                raise DataError(f"covariate {name!r} length differs from n")
            if isinstance(kind, Continuous):
                arr = arr.astype(np.float64)
                if not np.isfinite(arr).all():
                    raise DataError(f"non-finite value in continuous covariate {name!r}")
            else:
                arr = arr.astype(np.int64)
                if arr.min(initial=0) < 0 or arr.max(initial=0) >= len(kind.levels):
                    raise DataError(f"level code out of range in covariate {name!r}")
            arr.setflags(write=False)
            cols[name] = arr
        self.n = n
        self.covariates = cols
        self.treatment = treatment.astype(np.int8)
        self.treatment.setflags(write=False)
        self.outcome = outcome
        self.outcome.setflags(write=False)

    def column(self, name: str) -> np.ndarray:
        return self.covariates[name]

    def take(self, indices: np.ndarray) -> "Dataset":
        """New dataset of the selected rows (used by bootstrap resampling)."""
        return Dataset(
            self.schema,
            {name: arr[indices] for name, arr in self.covariates.items()},
            self.treatment[indices],
            self.outcome[indices],
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.schema == other.schema
            and self.n == other.n
            and np.array_equal(self.treatment, other.treatment)
            and np.array_equal(self.outcome, other.outcome)
            and all(np.array_equal(self.covariates[k], other.covariates[k]) for k in self.covariates)
        )


class SubgroupMask:
    """Boolean row membership for a subgroup; `size` is the number of set bits."""

    __slots__ = ("bits", "size")

    def __init__(self, bits: np.ndarray):
        bits = np.asarray(bits, dtype=bool)
        bits.setflags(write=False)
        self.bits = bits
        self.size = int(bits.sum())

    @classmethod
    def full(cls, n: int) -> "SubgroupMask":
        return cls(np.ones(n, dtype=bool))

    @classmethod
    def from_indices(cls, n: int, indices: Iterable[int]) -> "SubgroupMask":
        bits = np.zeros(n, dtype=bool)
        bits[np.asarray(list(indices), dtype=np.int64)] = True
        return cls(bits)

    def complement(self) -> "SubgroupMask":
        return SubgroupMask(~self.bits)

    def intersect(self, other: "SubgroupMask") -> "SubgroupMask":
        return SubgroupMask(self.bits & other.bits)

    def indices(self) -> np.ndarray:
        return np.nonzero(self.bits)[0]

    def __len__(self) -> int:
        return len(self.bits)


def subgroup_count(mask: SubgroupMask) -> int:
    """Number of observations in the subgroup."""
    return mask.size


def _parse_cell(token: str, kind: CovariateKind, column: str, line: int):
    if isinstance(kind, Continuous):
        try:
            value = float(token)
        except ValueError:
            raise DataError(f"line {line}: unparseable value {token!r} for continuous column {column!r}")
        if not math.isfinite(value):
            raise DataError(f"line {line}: non-finite value in column {column!r}")
        return value
    try:
        return kind.levels.index(token)
    except ValueError:
        raise DataError(f"line {line}: unknown level {token!r} for column {column!r}")


def load_csv(path, schema: Schema, missing_policy: str = "drop_rows") -> Dataset:
    """Load and validate a CSV file against a schema.

    The file must carry a header naming every schema column (order free,
    extra columns rejected). Cells equal to one of ``MISSING_TOKENS`` count
    as missing; under ``drop_rows`` such rows are removed (count logged),
    under ``reject`` any missing cell raises :class:`DataError`.
    """
    if missing_policy not in ("reject", "drop_rows"):
        raise ValueError(f"unknown missing_policy {missing_policy!r}")
    with open(path, "r", newline="", encoding="utf-8") as fh:
        return _load_csv_stream(fh, schema, missing_policy)


def _load_csv_stream(fh, schema: Schema, missing_policy: str) -> Dataset:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("empty CSV file")
    expected = set(schema.covariate_names) | {schema.treatment, schema.outcome}
    if set(header) != expected:
        raise DataError(f"header {header!r} does not match schema columns {sorted(expected)!r}")
    pos = {name: header.index(name) for name in expected}

    # compact typed buffers so ingestion stays near the on-disk size
    columns = {
        name: array.array("d" if isinstance(kind, Continuous) else "q")
        for name, kind in schema.columns
    }
    treatment = array.array("b")
    outcome = array.array("d")
    n_dropped = 0
    for line_no, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise DataError(f"line {line_no}: expected {len(header)} fields, found {len(row)}")
        if any(row[pos[name]].strip() in MISSING_TOKENS for name in expected):
            if missing_policy == "reject":
                raise DataError(f"line {line_no}: missing cell")
            n_dropped += 1
            continue
        a_token = row[pos[schema.treatment]].strip()
        if a_token not in ("0", "1"):
            raise DataError(f"line {line_no}: invalid treatment value {a_token!r}")
        treatment.append(int(a_token))
        y_token = row[pos[schema.outcome]].strip()
        try:
            y = float(y_token)
        except ValueError:
            raise DataError(f"line {line_no}: unparseable outcome {y_token!r}")
        outcome.append(y)
        for name, kind in schema.columns:
            columns[name].append(_parse_cell(row[pos[name]].strip(), kind, name, line_no))

    if n_dropped:
        logger.info("dropped %d rows with missing cells", n_dropped)
    arrays = {
        name: np.asarray(vals, dtype=np.float64 if isinstance(schema.kind_of(name), Continuous) else np.int64)
        for name, vals in columns.items()
    }
    return Dataset(schema, arrays, np.asarray(treatment), np.asarray(outcome))


def write_csv(dataset: Dataset, path) -> None:
    """Write a dataset back to CSV; loading the result reproduces the dataset."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        names = list(dataset.schema.covariate_names)
        writer.writerow(names + [dataset.schema.treatment, dataset.schema.outcome])
        for i in range(dataset.n):
            row = []
            for name in names:
                kind = dataset.schema.kind_of(name)
                if isinstance(kind, Continuous):
                    row.append(repr(float(dataset.covariates[name][i])))
                else:
                    row.append(kind.levels[dataset.covariates[name][i]])
            row.append(str(int(dataset.treatment[i])))
            row.append(repr(float(dataset.outcome[i])))
            writer.writerow(row)
