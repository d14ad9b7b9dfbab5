"""Tabular dataset, categorical encoding, missingness bookkeeping, support filtering.

Covariates are always complete; only the outcome may be missing. The
missingness indicator R is derived, never stored: R_i = 1 exactly when the
outcome is present. Data is held columnar (numpy arrays keyed by name) with
stable row ids so filtered subsets stay traceable to the source rows.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from .errors import DataError

MISSING_TOKENS = ("", "NA")


@dataclass(frozen=True)
class Variable:
    """One column: categorical (with levels) or continuous.

    ``levels=None`` on a categorical means "infer from the data, sorted".
    Roles: outcome | covariate | group (group = peer-group key hint for the
    median baseline; behaves like a covariate otherwise).
    """

    name: str
    kind: str
    levels: tuple | None = None
    role: str = "covariate"

    def __post_init__(self):
        if self.kind not in ("categorical", "continuous"):
            raise DataError(f"variable {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in ("outcome", "covariate", "group"):
            raise DataError(f"variable {self.name!r}: unknown role {self.role!r}")
        if self.kind == "continuous" and self.levels is not None:
            raise DataError(f"variable {self.name!r}: continuous variables have no levels")
        if self.levels is not None:
            if len(self.levels) == 0:
                raise DataError(f"variable {self.name!r}: empty level list")
            if len(set(self.levels)) != len(self.levels):
                raise DataError(f"variable {self.name!r}: duplicate levels")
            object.__setattr__(self, "levels", tuple(self.levels))


class VariableSchema:
    """Ordered variable roster with exactly one outcome."""

    def __init__(self, variables):
        self.variables = tuple(variables)
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise DataError("duplicate variable names in schema")
        outcomes = [v for v in self.variables if v.role == "outcome"]
        if len(outcomes) != 1:
            raise DataError(f"schema needs exactly one outcome variable, got {len(outcomes)}")
        if outcomes[0].kind != "continuous":
            raise DataError("outcome must be continuous")
        self._by_name = {v.name: v for v in self.variables}

    def __getitem__(self, name) -> Variable:
        try:
            return self._by_name[name]
        except KeyError:
            raise DataError(f"unknown variable {name!r}") from None

    def __contains__(self, name):
        return name in self._by_name

    def __iter__(self):
        return iter(self.variables)

    @property
    def outcome(self) -> Variable:
        return next(v for v in self.variables if v.role == "outcome")

    @property
    def covariates(self):
        return tuple(v for v in self.variables if v.role != "outcome")

    def with_levels(self, levels_by_name):
        out = []
        for v in self.variables:
            if v.name in levels_by_name:
                out.append(Variable(v.name, v.kind, tuple(levels_by_name[v.name]), v.role))
            else:
                out.append(v)
        return VariableSchema(out)


class Dataset:
    """Columnar dataset; outcome stored as float with NaN marking missing."""

    def __init__(self, schema: VariableSchema, columns: dict, row_ids=None):
        self.schema = schema
        self.columns = {}
        lengths = set()
        for v in schema:
            if v.name not in columns:
                raise DataError(f"missing column {v.name!r}")
            col = np.asarray(columns[v.name])
            if v.kind == "continuous":
                col = col.astype(np.float64)
            else:
                col = col.astype(str)
            self.columns[v.name] = col
            lengths.add(col.shape[0])
        if len(lengths) != 1:
            raise DataError("column lengths differ")
        self._n = lengths.pop()
        out_name = schema.outcome.name
        for v in schema.covariates:
            col = self.columns[v.name]
            if v.kind == "continuous" and np.any(~np.isfinite(col)):
                raise DataError(f"covariate {v.name!r} has missing or non-finite values")
            if v.kind == "categorical" and v.levels is not None:
                bad = ~np.isin(col, v.levels)
                if np.any(bad):
                    i = int(np.nonzero(bad)[0][0])
                    raise DataError(
                        f"row {i}, column {v.name!r}: unknown level {col[i]!r}")
        self.outcome = self.columns[out_name]
        self.observed = ~np.isnan(self.outcome)
        if row_ids is None:
            row_ids = np.arange(self._n, dtype=np.int64)
        self.row_ids = np.asarray(row_ids, dtype=np.int64)
        if self.row_ids.shape[0] != self._n:
            raise DataError("row_ids length mismatch")

    @property
    def n(self) -> int:
        return self._n

    @property
    def n1(self) -> int:
        return int(self.observed.sum())

    @property
    def n0(self) -> int:
        return self._n - self.n1

    def column(self, name):
        return self.columns[name]

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        cols = {name: col[mask] for name, col in self.columns.items()}
        return Dataset(self.schema, cols, self.row_ids[mask])

    def with_outcome(self, values) -> "Dataset":
        values = np.asarray(values, dtype=np.float64)
        if values.shape[0] != self._n:
            raise DataError("outcome length mismatch")
        cols = dict(self.columns)
        cols[self.schema.outcome.name] = values
        return Dataset(self.schema, cols, self.row_ids)


@dataclass(frozen=True)
class DesignSpec:
    """Covariate lists for the outcome (X) and selection (X^s) equations."""

    outcome_covariates: tuple
    selection_covariates: tuple
    include_intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, "outcome_covariates", tuple(self.outcome_covariates))
        object.__setattr__(self, "selection_covariates", tuple(self.selection_covariates))
        if not self.include_intercept:
            raise DataError("models are always fit with an intercept")

    @property
    def has_exclusion_restriction(self) -> bool:
        return set(self.outcome_covariates) != set(self.selection_covariates)

    @property
    def all_covariates(self):
        seen = []
        for name in self.outcome_covariates + self.selection_covariates:
            if name not in seen:
                seen.append(name)
        return tuple(seen)


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    column_names: tuple
    row_ids: np.ndarray

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def k(self):
        return self.values.shape[1]


@dataclass
class DropReport:
    """Rows removed by common-support filtering: (row_id, covariate, level, reason)."""

    entries: list = field(default_factory=list)

    @property
    def n_dropped(self):
        return len(self.entries)

    def dropped_row_ids(self):
        return sorted({e[0] for e in self.entries})


def load_csv(path, schema: VariableSchema) -> Dataset:
    """Read a UTF-8 CSV with a header row into a Dataset.

    Blank or "NA" outcome cells mean missing; any other unparseable outcome
    cell is an error. Categorical cells are validated against declared levels;
    variables declared with levels=None get their levels inferred (sorted).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for v in schema:
            if v.name not in header:
                raise DataError(f"{path}: column {v.name!r} missing from header")
        idx = {v.name: header.index(v.name) for v in schema}
        out_name = schema.outcome.name
        raw = {v.name: [] for v in schema}
        for rownum, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}: malformed row {rownum} "
                                f"({len(row)} cells, expected {len(header)})")
            for v in schema:
                cell = row[idx[v.name]].strip()
                if v.kind == "continuous":
                    if v.name == out_name and cell in MISSING_TOKENS:
                        raw[v.name].append(math.nan)
                        continue
                    try:
                        raw[v.name].append(float(cell))
                    except ValueError:
                        raise DataError(
                            f"{path}: row {rownum}, column {v.name!r}: "
                            f"non-numeric value {cell!r}") from None
                else:
                    if v.levels is not None and cell not in v.levels:
                        raise DataError(
                            f"{path}: row {rownum}, column {v.name!r}: "
                            f"unknown level {cell!r}")
                    raw[v.name].append(cell)
    inferred = {}
    for v in schema:
        if v.kind == "categorical" and v.levels is None:
            inferred[v.name] = tuple(sorted(set(raw[v.name])))
    if inferred:
        schema = schema.with_levels(inferred)
    return Dataset(schema, raw)


def write_csv(ds: Dataset, path):
    """Write a Dataset back out (RFC 4180; missing outcome as empty cell)."""
    names = [v.name for v in ds.schema]
    out_name = ds.schema.outcome.name
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for i in range(ds.n):
            row = []
            for name in names:
                val = ds.columns[name][i]
                if name == out_name and isinstance(val, float) and math.isnan(val):
                    row.append("")
                elif ds.schema[name].kind == "continuous":
                    row.append(repr(float(val)))
                else:
                    row.append(str(val))
            writer.writerow(row)


def check_common_support(ds: Dataset, spec: DesignSpec):
    """Drop rows of categorical levels lacking either observed or missing rows.

    Only covariates referenced by the spec are checked. Dropping rows for one
    covariate can break support for another, so the filter iterates to a
    fixpoint (which also makes it idempotent).
    """
    if ds.n == 0:
        raise DataError("empty dataset")
    keep = np.ones(ds.n, dtype=bool)
    report = DropReport()
    cat_vars = [name for name in spec.all_covariates
                if name in ds.schema and ds.schema[name].kind == "categorical"]
    changed = True
    while changed:
        changed = False
        for name in cat_vars:
            col = ds.columns[name]
            for level in np.unique(col[keep]):
                in_level = keep & (col == level)
                n_obs = int(np.sum(in_level & ds.observed))
                n_mis = int(np.sum(in_level & ~ds.observed))
                if n_obs == 0 or n_mis == 0:
                    reason = ("no observed outcomes" if n_obs == 0
                              else "no missing outcomes")
                    for rid in ds.row_ids[in_level]:
                        report.entries.append((int(rid), name, str(level), reason))
                    keep &= ~in_level
                    changed = True
    if not keep.any():
        raise DataError("common-support filtering dropped every row")
    return ds.subset(keep), report


def _level_columns(ds: Dataset, var: Variable):
    """Non-reference levels that actually occur in the dataset, declared order."""
    present = set(np.unique(ds.columns[var.name]))
    declared = var.levels if var.levels is not None else tuple(sorted(present))
    levels = [lv for lv in declared if lv in present]
    if not levels:
        raise DataError(f"covariate {var.name!r}: no declared level present in data")
    return levels[0], levels[1:]


def encode_design(ds: Dataset, covariates, rows=None) -> DesignMatrix:
    """Encode covariates into a dense design matrix.

    Intercept first, then each covariate in list order: categoricals one-hot
    with the first (present) declared level as reference, continuous as-is.
    Level columns are derived from the full dataset so encoding commutes with
    row subsetting. Rank deficiency is an error naming the collinear columns.
    """
    if rows is None:
        rows = np.arange(ds.n)
    else:
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.nonzero(rows)[0]
    cols = [np.ones(rows.shape[0])]
    names = ["intercept"]
    for name in covariates:
        var = ds.schema[name]
        if var.kind == "continuous":
            cols.append(ds.columns[name][rows])
            names.append(name)
        else:
            _, contrast = _level_columns(ds, var)
            values = ds.columns[name][rows]
            for lv in contrast:
                cols.append((values == lv).astype(np.float64))
                names.append(f"{name}[{lv}]")
    x = np.column_stack(cols)
    _, r, piv = sla.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag[0] * max(x.shape) * np.finfo(np.float64).eps if diag[0] > 0 else 0.0
    rank = int(np.sum(diag > tol))
    if rank < x.shape[1]:
        bad = sorted(names[j] for j in piv[rank:])
        raise DataError("design matrix is rank deficient; collinear columns: "
                        + ", ".join(bad))
    return DesignMatrix(x, tuple(names), ds.row_ids[rows])
