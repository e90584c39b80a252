"""Winsorized linear terms, the shared basis and the arm-masked design."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, RuleTerm, rule_matrix
from .errors import DataError

logger = logging.getLogger(__name__)

LINEAR_SCALE = 0.4


@dataclass(frozen=True)
class LinearTerm:
    """``scale * clamp(x_j, lower, upper)``."""

    j: int
    lower: float
    upper: float
    scale: float

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise ValueError("winsorization bounds out of order")
        if not self.scale > 0:
            raise ValueError("linear term scale must be positive")

    def evaluate(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        col = X[:, self.j] if X.ndim == 2 else X
        return self.scale * np.minimum(self.upper, np.maximum(self.lower, col))

    def describe(self, names=None) -> str:
        return names[self.j] if names else f"x{self.j + 1}"


def fit_linear_terms(data: Dataset, q: float = 0.025, dropped: list | None = None) -> list:
    """Winsorize each covariate at its ``q`` / ``1 - q`` quantiles and scale to SD 0.4.

    Quantiles interpolate linearly between order statistics.  Columns whose
    winsorized SD is zero are skipped; their indices are appended to
    ``dropped`` when a list is supplied.
    """
    if not 0 <= q < 0.5:
        raise ValueError("q must lie in [0, 0.5)")
    terms = []
    for j in range(data.p):
        col = data.X[:, j]
        lo, hi = np.quantile(col, [q, 1 - q])
        clamped = np.minimum(hi, np.maximum(lo, col))
        sd = clamped.std()
        if not sd > 0:
            logger.warning("dropping linear term for %s: zero SD after winsorizing", data.names[j])
            if dropped is not None:
                dropped.append(j)
            continue
        terms.append(LinearTerm(j, float(lo), float(hi), LINEAR_SCALE / float(sd)))
    return terms


def apply_linear_term(term: LinearTerm, x_j: float) -> float:
    return term.scale * min(term.upper, max(term.lower, x_j))


@dataclass(frozen=True)
class BasisSet:
    """Rules followed by linear terms; the column order of every coefficient matrix."""

    rules: tuple = ()
    linears: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        object.__setattr__(self, "linears", tuple(self.linears))

    def __len__(self):
        return len(self.rules) + len(self.linears)

    @property
    def n_rules(self) -> int:
        return len(self.rules)

    def evaluate(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.empty((X.shape[0], len(self)))
        if self.rules:
            out[:, : self.n_rules] = rule_matrix(self.rules, X)
        for k, lt in enumerate(self.linears):
            out[:, self.n_rules + k] = lt.evaluate(X)
        return out

    def variables(self, g: int) -> tuple:
        if g < self.n_rules:
            return self.rules[g].variables
        return (self.linears[g - self.n_rules].j,)

    def describe(self, g: int, names=None) -> str:
        if g < self.n_rules:
            return self.rules[g].describe(names)
        return self.linears[g - self.n_rules].describe(names)


@dataclass
class GroupedDesign:
    """Arm-masked design with one group per basis function.

    Column ``(g, t)`` holds ``I(w_i = t) * b_g(x_i)``.  For the solver each
    column is centred on its arm's rows, which makes it orthogonal to the
    per-arm intercepts.  With ``standardize`` (the default) it is also
    scaled to zero mean and unit SD over all ``n`` rows (squared norm
    ``n``); columns in one group touch disjoint rows, so each group is then
    orthonormal up to the factor ``n``.  Without it the penalty acts on the
    raw basis coefficients.  ``means[g, t]`` and ``scales[g, t]`` are the
    per-column statistics; ``scales == 0`` marks a basis function that is
    constant within an arm, whose coefficient for that arm is fixed at zero.
    """

    raw: np.ndarray  # n x G basis values, unmasked
    w: np.ndarray
    n_arms: int
    means: np.ndarray  # G x (T+1)
    scales: np.ndarray  # G x (T+1)
    Bt: np.ndarray  # G x n standardised values, each row already masked to its arm
    labels: list = field(default_factory=list)
    standardize: bool = True

    @property
    def gram(self) -> np.ndarray:
        """G x (T+1) diagonal of each group's Gram matrix in solver coordinates."""
        if self.standardize:
            # exactly n for every scaled column, so all groups take the closed-form update
            return np.where(self.scales > 0, float(self.n), 0.0)
        counts = np.zeros((self.n_groups, self.n_arms))
        for t in range(self.n_arms):
            counts[:, t] = (self.Bt[:, self.w == t] ** 2).sum(axis=1)
        return counts

    @property
    def n(self) -> int:
        return self.raw.shape[0]

    @property
    def n_groups(self) -> int:
        return self.raw.shape[1]

    @property
    def T(self) -> int:
        return self.n_arms - 1

    def dense(self) -> np.ndarray:
        """Explicit n x (G * (T+1)) masked design on the raw basis scale."""
        mask = self.w[:, None] == np.arange(self.n_arms)[None, :]
        return (self.raw[:, :, None] * mask[:, None, :]).reshape(self.n, -1)

    def standardized_dense(self) -> np.ndarray:
        mask = self.w[:, None] == np.arange(self.n_arms)[None, :]
        return (self.Bt.T[:, :, None] * mask[:, None, :]).reshape(self.n, -1)

    def to_original(self, theta: np.ndarray, arm_means: np.ndarray):
        """Map standardised coefficients to (intercepts, coef) on the raw basis scale."""
        coef = np.zeros_like(theta)
        nz = self.scales > 0
        coef[nz] = theta[nz] / self.scales[nz]
        intercepts = arm_means - (coef * self.means).sum(axis=0)
        return intercepts, coef

    def subset(self, rows) -> "GroupedDesign":
        """Design restricted to ``rows`` with statistics recomputed on them."""
        return grouped_design_from_basis(self.raw[rows], self.w[rows], self.n_arms, self.labels, self.standardize)


def grouped_design_from_basis(raw: np.ndarray, w: np.ndarray, n_arms: int, labels=None,
                              standardize: bool = True) -> GroupedDesign:
    raw = np.asarray(raw, dtype=np.float64)
    w = np.asarray(w, dtype=np.int64)
    n, G = raw.shape
    if w.size and (w.min() < 0 or w.max() >= n_arms):
        raise DataError(f"arm index outside 0..{n_arms - 1}")
    means = np.zeros((G, n_arms))
    scales = np.zeros((G, n_arms))
    Bt = np.zeros((G, n))
    for t in range(n_arms):
        rows = np.flatnonzero(w == t)
        if rows.size == 0:
            continue
        block = raw[rows]
        mu = block.mean(axis=0)
        centred = block - mu
        ss = (centred * centred).sum(axis=0)
        # relative threshold guards against rounding residue in constant columns
        tiny = ss <= 1e-24 * np.maximum(1.0, (block * block).sum(axis=0))
        sc = np.where(tiny, 0.0, np.sqrt(ss / n) if standardize else 1.0)
        means[:, t] = mu
        scales[:, t] = sc
        inv = np.where(sc > 0, 1.0 / np.where(sc > 0, sc, 1.0), 0.0)
        Bt[:, rows] = (centred * inv).T
    return GroupedDesign(raw, w, n_arms, means, scales, np.ascontiguousarray(Bt), list(labels or []), standardize)


def build_grouped_design(data: Dataset, rules, linears, standardize: bool = True) -> GroupedDesign:
    basis = BasisSet(rules, linears)
    labels = [basis.describe(g, data.names) for g in range(len(basis))]
    return grouped_design_from_basis(basis.evaluate(data.X), data.w, data.n_arms, labels, standardize)
