"""Datasets, CSV ingestion and rule terms."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

CONTINUOUS = "continuous"
BINARY = "binary"


@dataclass(frozen=True)
class Dataset:
    """Outcomes ``y``, arm labels ``w`` in ``0..T`` and covariates ``X``.

    Arm 0 is the control.  ``col_kinds`` records, per covariate, whether the
    column is binary (values in {0, 1}) or continuous.
    """

    y: np.ndarray
    w: np.ndarray
    X: np.ndarray
    T: int
    col_kinds: tuple = ()
    names: tuple = ()

    def __post_init__(self):
        y = np.ascontiguousarray(self.y, dtype=np.float64).reshape(-1)
        w = np.ascontiguousarray(self.w).reshape(-1)
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        n, p = X.shape
        if n < 1 or p < 1:
            raise DataError("dataset needs at least one row and one covariate")
        if y.shape[0] != n or w.shape[0] != n:
            raise DataError(f"length mismatch: y={y.shape[0]}, w={w.shape[0]}, X={n}")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(X)):
            raise DataError("non-finite values in y or X")
        if np.issubdtype(w.dtype, np.floating):
            if not np.all(np.isfinite(w)) or np.any(w != np.round(w)):
                raise DataError("arm labels must be integers")
        w = w.astype(np.int64)
        T = int(self.T)
        if T < 1:
            raise DataError(f"need at least one non-control arm, got T={T}")
        if w.min() < 0 or w.max() > T:
            raise DataError(f"arm labels must lie in 0..{T}, got range {w.min()}..{w.max()}")
        kinds = tuple(self.col_kinds) if self.col_kinds else infer_col_kinds(X)
        if len(kinds) != p:
            raise DataError(f"col_kinds has {len(kinds)} entries for {p} columns")
        for j, k in enumerate(kinds):
            if k == BINARY and not np.all((X[:, j] == 0) | (X[:, j] == 1)):
                raise DataError(f"column {j} declared binary but has values outside {{0,1}}")
            if k not in (BINARY, CONTINUOUS):
                raise DataError(f"unknown column kind {k!r}")
        names = tuple(self.names) if self.names else tuple(f"x{j + 1}" for j in range(p))
        if len(names) != p:
            raise DataError(f"{len(names)} names for {p} columns")
        for arr in (y, w, X):
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "col_kinds", kinds)
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def n_arms(self) -> int:
        return self.T + 1

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.y[rows], self.w[rows], self.X[rows], self.T, self.col_kinds, self.names)

    def with_outcome(self, y) -> "Dataset":
        return Dataset(y, self.w, self.X, self.T, self.col_kinds, self.names)


def infer_col_kinds(X: np.ndarray) -> tuple:
    X = np.asarray(X, dtype=np.float64)
    return tuple(
        BINARY if np.all((X[:, j] == 0) | (X[:, j] == 1)) else CONTINUOUS for j in range(X.shape[1])
    )


@dataclass(frozen=True)
class Schema:
    """Column roles for CSV ingestion.  ``covariates=None`` means every other column."""

    outcome: str = "y"
    arm: str = "w"
    covariates: Sequence[str] | None = None


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        return header, list(reader)


def _numeric_block(path, header, rows, needed) -> np.ndarray:
    missing = [c for c in needed if c not in header]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    if not rows:
        raise DataError(f"{path}: no data rows")
    idx = [header.index(c) for c in needed]
    values = np.empty((len(rows), len(needed)))
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r + 2} has {len(row)} cells, header has {len(header)}")
        for k, c in enumerate(idx):
            cell = row[c].strip()
            if cell == "" or cell.upper() in ("NA", "NAN"):
                raise DataError(f"{path}: missing value at row {r + 2}, column {header[c]!r}")
            try:
                values[r, k] = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: non-numeric value {cell!r} at row {r + 2}, column {header[c]!r}"
                ) from None
            if not math.isfinite(values[r, k]):
                raise DataError(f"{path}: non-finite value at row {r + 2}, column {header[c]!r}")
    return values


def read_columns(path, columns: Sequence[str]) -> np.ndarray:
    """Numeric matrix of the named CSV columns, in the given order."""
    header, rows = _read_csv(path)
    return _numeric_block(path, header, rows, list(columns))


def load_dataset(path, schema: Schema | None = None, T: int | None = None) -> Dataset:
    """Read a CSV file into a validated :class:`Dataset`.

    ``T`` defaults to the largest arm label present.  Empty cells and
    non-numeric cells are rejected with the offending row and column named
    (rows are 1-based and count the header as row 1).
    """
    schema = schema or Schema()
    header, rows = _read_csv(path)
    covs = list(schema.covariates) if schema.covariates else [
        h for h in header if h not in (schema.outcome, schema.arm)
    ]
    if not covs:
        raise DataError(f"{path}: no covariate columns")
    values = _numeric_block(path, header, rows, [schema.outcome, schema.arm, *covs])
    w = values[:, 1]
    if np.any(w != np.round(w)) or np.any(w < 0):
        bad = int(np.flatnonzero((w != np.round(w)) | (w < 0))[0])
        raise DataError(f"{path}: invalid arm value {w[bad]!r} at row {bad + 2}")
    T_obs = int(w.max())
    if T is None:
        T = T_obs
    elif T_obs > T:
        bad = int(np.flatnonzero(w > T)[0])
        raise DataError(f"{path}: arm value {int(w[bad])} at row {bad + 2} exceeds T={T}")
    return Dataset(values[:, 0], w.astype(np.int64), values[:, 2:], T, names=tuple(covs))


def write_dataset(data: Dataset, path, outcome: str = "y", arm: str = "w") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow([outcome, arm, *data.names])
        for i in range(data.n):
            out.writerow([repr(float(data.y[i])), int(data.w[i]), *(repr(float(v)) for v in data.X[i])])


@dataclass(frozen=True, order=True)
class Condition:
    """``lower <= x[j] < upper``; infinite bounds are open."""

    j: int
    lower: float = -math.inf
    upper: float = math.inf

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"empty interval [{self.lower}, {self.upper}) on x{self.j}")


@dataclass(frozen=True)
class RuleTerm:
    """Conjunction of interval conditions, at most one per covariate."""

    conditions: tuple = field(default_factory=tuple)

    def __post_init__(self):
        conds = tuple(sorted(self.conditions, key=lambda c: c.j))
        if not conds:
            raise ValueError("a rule needs at least one condition")
        if len({c.j for c in conds}) != len(conds):
            raise ValueError("duplicate covariate in rule; merge conditions first")
        object.__setattr__(self, "conditions", conds)

    @classmethod
    def from_conditions(cls, conditions: Iterable[Condition]) -> "RuleTerm":
        """Build a rule, intersecting conditions that share a covariate."""
        bounds: dict[int, list] = {}
        for c in conditions:
            lo, hi = bounds.get(c.j, (-math.inf, math.inf))
            bounds[c.j] = [max(lo, c.lower), min(hi, c.upper)]
        return cls(tuple(Condition(j, lo, hi) for j, (lo, hi) in bounds.items()))

    @property
    def key(self) -> tuple:
        return tuple((c.j, c.lower, c.upper) for c in self.conditions)

    @property
    def variables(self) -> tuple:
        return tuple(c.j for c in self.conditions)

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        """Vectorised evaluation over the rows of ``X``; returns a 0/1 float array."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if max(self.variables) >= X.shape[1]:
            raise DataError(f"rule uses covariate {max(self.variables)} but x has {X.shape[1]} entries")
        out = np.ones(X.shape[0], dtype=bool)
        for c in self.conditions:
            col = X[:, c.j]
            out &= (col >= c.lower) & (col < c.upper)
        return out.astype(np.float64)

    def describe(self, names: Sequence[str] | None = None) -> str:
        parts = []
        for c in self.conditions:
            name = names[c.j] if names else f"x{c.j + 1}"
            if c.lower != -math.inf:
                parts.append(f"{name}>={c.lower:.6g}")
            if c.upper != math.inf:
                parts.append(f"{name}<{c.upper:.6g}")
        return " & ".join(parts)


def evaluate_rule(rule: RuleTerm, x) -> int:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DataError("evaluate_rule takes a single covariate vector")
    return int(rule.evaluate(x)[0])


def rule_support(rule: RuleTerm, data: Dataset) -> float:
    return float(rule.evaluate(data.X).mean())


def rule_matrix(rules: Sequence[RuleTerm], X: np.ndarray) -> np.ndarray:
    """n x len(rules) matrix of rule evaluations."""
    X = np.asarray(X, dtype=np.float64)
    out = np.empty((X.shape[0], len(rules)))
    for k, r in enumerate(rules):
        out[:, k] = r.evaluate(X)
    return out
