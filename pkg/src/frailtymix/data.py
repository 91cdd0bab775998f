"""Dataset schema, ingestion and design-matrix construction.

A dataset is a list of observations (time, status, group, covariates)
plus a schema declaring each covariate's kind and role. Covariates can
enter the marginal model (clustered Gaussian / multinomial densities),
the survival regression, or both. Categorical regression variables are
reference-coded with the first declared category as baseline.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "DataError",
    "VariableSpec",
    "Observation",
    "Dataset",
    "DesignMatrices",
    "load_dataset",
    "save_dataset",
    "split_covariates",
]

RESERVED_COLUMNS = ("time", "status", "group")


class DataError(ValueError):
    """Raised for malformed input files or schema violations."""


@dataclass(frozen=True)
class VariableSpec:
    """Declaration of one covariate: its kind and model roles."""

    name: str
    kind: str  # "continuous" | "categorical"
    categories: tuple = ()
    in_marginal: bool = False
    in_regression: bool = False

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise DataError(f"variable {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical" and len(self.categories) < 2:
            raise DataError(f"variable {self.name!r}: categorical needs >= 2 categories")
        if self.kind == "continuous" and self.categories:
            raise DataError(f"variable {self.name!r}: continuous takes no categories")
        if not (self.in_marginal or self.in_regression):
            raise DataError(f"variable {self.name!r}: must be marginal and/or regression")
        if self.name in RESERVED_COLUMNS:
            raise DataError(f"variable name {self.name!r} is reserved")


@dataclass(frozen=True)
class Observation:
    time: float
    status: int
    group: str
    values: tuple


@dataclass(frozen=True)
class DesignMatrices:
    """Covariate matrices: continuous marginal U, categorical marginal V
    (integer category codes) and the reference-coded regression matrix X."""

    U: np.ndarray
    V: np.ndarray
    X: np.ndarray
    u_names: tuple
    v_names: tuple
    v_categories: tuple  # tuple of category tuples, aligned with v_names
    x_names: tuple


@dataclass(frozen=True)
class Dataset:
    schema: tuple
    observations: tuple
    group_labels: tuple = field(default=())

    def __post_init__(self):
        names = [v.name for v in self.schema]
        if len(set(names)) != len(names):
            raise DataError("duplicate variable names in schema")
        if not self.group_labels:
            seen = dict.fromkeys(obs.group for obs in self.observations)
            object.__setattr__(self, "group_labels", tuple(seen))

    @property
    def n_obs(self) -> int:
        return len(self.observations)

    @property
    def n_groups(self) -> int:
        return len(self.group_labels)

    @cached_property
    def group_index(self) -> np.ndarray:
        """Per-observation group index in 0..J-1, following group_labels order."""
        lookup = {label: j for j, label in enumerate(self.group_labels)}
        return np.array([lookup[obs.group] for obs in self.observations], dtype=np.intp)

    @cached_property
    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.group_index, minlength=self.n_groups)

    @cached_property
    def time(self) -> np.ndarray:
        return np.array([obs.time for obs in self.observations], dtype=float)

    @cached_property
    def status(self) -> np.ndarray:
        return np.array([obs.status for obs in self.observations], dtype=np.intp)

    @cached_property
    def design(self) -> DesignMatrices:
        return split_covariates(self)


def _parse_row(row_no: int, row: dict, schema) -> Observation:
    def fail(msg):
        raise DataError(f"row {row_no}: {msg}")

    try:
        time = float(row["time"])
    except ValueError:
        fail(f"non-numeric time {row['time']!r}")
    if time <= 0:
        fail(f"time must be positive, got {time}")
    if row["status"] not in ("0", "1"):
        fail(f"status outside {{0,1}}: {row['status']!r}")
    group = row["group"]
    values = []
    for spec in schema:
        raw = row[spec.name]
        if raw == "":
            fail(f"missing value in column {spec.name!r}")
        if spec.kind == "continuous":
            try:
                values.append(float(raw))
            except ValueError:
                fail(f"non-numeric value {raw!r} in column {spec.name!r}")
        else:
            if raw not in spec.categories:
                fail(f"undeclared category {raw!r} in column {spec.name!r}")
            values.append(raw)
    return Observation(time, int(row["status"]), group, tuple(values))


def load_dataset(path, schema) -> Dataset:
    """Read a comma-separated file with a header row into a Dataset.

    Required columns: ``time``, ``status``, ``group`` plus every schema
    variable. Row order is preserved; group labels are indexed in order
    of first appearance.
    """
    schema = tuple(schema)
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        needed = list(RESERVED_COLUMNS) + [v.name for v in schema]
        missing = [c for c in needed if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        observations = []
        for row_no, row in enumerate(reader, start=2):
            if any(value is None for value in row.values()):
                raise DataError(f"row {row_no}: short row")
            observations.append(_parse_row(row_no, row, schema))
    if not observations:
        raise DataError(f"{path}: no data rows")
    return Dataset(schema, tuple(observations))


def save_dataset(dataset: Dataset, path) -> None:
    """Write a Dataset back to delimited text; inverse of load_dataset."""
    columns = list(RESERVED_COLUMNS) + [v.name for v in dataset.schema]
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(columns)
        for obs in dataset.observations:
            row = [f"{obs.time:.17g}", obs.status, obs.group]
            for spec, value in zip(dataset.schema, obs.values):
                row.append(f"{value:.17g}" if spec.kind == "continuous" else value)
            writer.writerow(row)


def split_covariates(dataset: Dataset) -> DesignMatrices:
    """Build U (marginal continuous), V (marginal categorical codes) and
    the reference-coded regression matrix X from the schema roles."""
    n = dataset.n_obs
    u_cols, u_names = [], []
    v_cols, v_names, v_categories = [], [], []
    x_cols, x_names = [], []
    for idx, spec in enumerate(dataset.schema):
        column = [obs.values[idx] for obs in dataset.observations]
        if spec.kind == "continuous":
            values = np.asarray(column, dtype=float)
            if spec.in_marginal:
                u_cols.append(values)
                u_names.append(spec.name)
            if spec.in_regression:
                x_cols.append(values)
                x_names.append(spec.name)
        else:
            codes = np.array([spec.categories.index(v) for v in column], dtype=np.intp)
            if spec.in_marginal:
                v_cols.append(codes)
                v_names.append(spec.name)
                v_categories.append(spec.categories)
            if spec.in_regression:
                # k-1 indicator columns, first declared category as reference
                for level in range(1, len(spec.categories)):
                    x_cols.append((codes == level).astype(float))
                    x_names.append(f"{spec.name}={spec.categories[level]}")
    empty = np.empty((n, 0))
    return DesignMatrices(
        U=np.column_stack(u_cols) if u_cols else empty,
        V=np.column_stack(v_cols).astype(np.intp) if v_cols else empty.astype(np.intp),
        X=np.column_stack(x_cols) if x_cols else empty,
        u_names=tuple(u_names),
        v_names=tuple(v_names),
        v_categories=tuple(v_categories),
        x_names=tuple(x_names),
    )
