"""Group lasso and adaptive group lasso over the arm-masked design."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .basis import GroupedDesign
from .errors import ConfigError, NumericalError

logger = logging.getLogger(__name__)

GROUP_LASSO = "group_lasso"
ADAPTIVE = "adaptive_group_lasso"
METHODS = (GROUP_LASSO, ADAPTIVE)


@dataclass(frozen=True)
class EnsembleConfig:
    method: str = GROUP_LASSO
    n_lambda: int = 100
    lambda_ratio: float = 1e-3
    folds: int = 10
    tol: float = 1e-4  # relative to the SD of y
    max_iter: int = 100_000
    group_size: str = "T"  # penalty multiplier sqrt(T); "T+1" uses sqrt(T+1)
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"ensemble method must be one of {METHODS}")
        if self.n_lambda < 1:
            raise ConfigError("n_lambda must be >= 1")
        if not 0 < self.lambda_ratio < 1:
            raise ConfigError("lambda_ratio must lie in (0, 1)")
        if self.folds < 2:
            raise ConfigError("need at least 2 CV folds")
        if self.group_size not in ("T", "T+1"):
            raise ConfigError("group_size must be 'T' or 'T+1'")


@dataclass
class GroupLassoFit:
    intercepts: np.ndarray  # T+1
    coef: np.ndarray  # G x (T+1), raw basis scale
    theta: np.ndarray  # G x (T+1), standardised scale
    lam: float
    penalty_weights: np.ndarray
    objective: float
    kkt_residual: float
    converged: bool = True
    n_iter: int = 0
    flags: list = field(default_factory=list)

    @property
    def active_groups(self) -> np.ndarray:
        return np.flatnonzero(np.any(self.coef != 0, axis=1))

    def predict(self, raw: np.ndarray, w: np.ndarray) -> np.ndarray:
        out = np.empty(raw.shape[0])
        for t in range(self.coef.shape[1]):
            rows = w == t
            out[rows] = self.intercepts[t] + raw[rows] @ self.coef[:, t]
        return out

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "intercepts": self.intercepts.tolist(),
            "coef": self.coef.tolist(),
            "penalty_weights": [None if not math.isfinite(v) else v for v in self.penalty_weights.tolist()],
            "objective": self.objective,
            "kkt_residual": self.kkt_residual,
            "converged": self.converged,
            "active_groups": self.active_groups.tolist(),
            "flags": list(self.flags),
        }


def penalty_factor(T: int, group_size: str = "T") -> float:
    return math.sqrt(T + 1) if group_size == "T+1" else math.sqrt(T)


def _weights(design: GroupedDesign, weights) -> np.ndarray:
    if weights is None:
        return np.ones(design.n_groups)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (design.n_groups,):
        raise ConfigError(f"need {design.n_groups} penalty weights, got {weights.shape}")
    if np.any(weights < 0) or np.any(np.isnan(weights)):
        raise ConfigError("penalty weights must be >= 0 or inf")
    return weights


def _arm_means(design: GroupedDesign, y: np.ndarray) -> np.ndarray:
    counts = np.bincount(design.w, minlength=design.n_arms)
    sums = np.bincount(design.w, weights=y, minlength=design.n_arms)
    means = np.full(design.n_arms, y.mean() if y.size else 0.0)
    means[counts > 0] = sums[counts > 0] / counts[counts > 0]
    if np.any(counts == 0):
        logger.warning("arms %s absent from training rows; their intercept is the pooled mean",
                       np.flatnonzero(counts == 0).tolist())
    return means


def lambda_max(design: GroupedDesign, y, weights=None, group_size: str = "T") -> float:
    """Smallest penalty at which every finitely weighted group is zero."""
    y = np.asarray(y, dtype=np.float64)
    wts = _weights(design, weights)
    finite = np.isfinite(wts)
    if not finite.any():
        raise ConfigError("every group has infinite penalty weight")
    r0 = y - _arm_means(design, y)[design.w]
    norms = np.linalg.norm(kernels.gradients(design.Bt, design.w, design.n_arms, r0), axis=1)
    factor = penalty_factor(design.T, group_size)
    with np.errstate(divide="ignore"):
        ratio = np.where(finite & (norms > 0), norms / (factor * np.where(finite, wts, 1.0)), 0.0)
    return float(np.max(ratio[finite]))


def lambda_path(lmax: float, n_lambda: int = 100, ratio: float = 1e-3) -> np.ndarray:
    if lmax <= 0:
        return np.zeros(1)
    if n_lambda == 1:
        return np.array([lmax])
    return lmax * np.logspace(0, math.log10(ratio), n_lambda)


class _PathSolver:
    """Warm-started solves along a decreasing penalty sequence."""

    def __init__(self, design, y, weights, group_size, tol, max_iter):
        self.design = design
        self.y = np.asarray(y, dtype=np.float64)
        self.weights = _weights(design, weights)
        self.unit = penalty_factor(design.T, group_size) * self.weights
        self.idx_all = np.flatnonzero(np.isfinite(self.unit)).astype(np.int64)
        self.tol = tol
        self.max_iter = max_iter
        self.arm_means = _arm_means(design, self.y)
        self.r = self.y - self.arm_means[design.w]
        self.theta = np.zeros((design.n_groups, design.n_arms))
        self.gram = np.ascontiguousarray(design.gram)
        self.grad = self._gradients()
        self.prev_lam = None

    def _gradients(self):
        d = self.design
        return kernels.gradients(d.Bt, d.w, d.n_arms, self.r)

    def solve(self, lam: float, theta0=None) -> GroupLassoFit:
        d = self.design
        if lam < 0:
            raise ConfigError("lambda must be >= 0")
        if theta0 is not None:
            self.theta = np.array(theta0, dtype=np.float64)
            self.r = self.y - self.arm_means[d.w] - np.einsum("gi,gi->i", d.Bt, self.theta[:, d.w])
            self.grad = self._gradients()
            self.prev_lam = None
        finite = np.isfinite(self.unit)
        pen = np.full(d.n_groups, np.inf)
        pen[finite] = lam * self.unit[finite]
        pen_f = np.where(np.isfinite(pen), pen, 0.0)
        norms = np.linalg.norm(self.grad, axis=1)
        active = np.any(self.theta != 0, axis=1)
        if self.prev_lam is not None and self.prev_lam >= lam:
            keep = norms[self.idx_all] >= self.unit[self.idx_all] * (2 * lam - self.prev_lam)
            strong = self.idx_all[keep | active[self.idx_all]]
        else:
            strong = self.idx_all
        in_strong = np.zeros(d.n_groups, dtype=bool)
        in_strong[strong] = True
        total_it = 0
        converged = True
        while True:
            it, ok = kernels.bcd(d.Bt, d.w, d.n_arms, self.r, self.theta, self.gram, pen_f,
                                 np.ascontiguousarray(strong, dtype=np.int64), self.tol, self.max_iter)
            total_it += it
            converged = converged and ok
            self.grad = self._gradients()
            norms = np.linalg.norm(self.grad, axis=1)
            viol = self.idx_all[~in_strong[self.idx_all]]
            viol = viol[norms[viol] > pen[viol] * (1 + 1e-9) + 1e-12]
            if viol.size == 0:
                break
            in_strong[viol] = True
            strong = np.flatnonzero(in_strong).astype(np.int64)
        self.prev_lam = lam
        return self._result(lam, pen, pen_f, norms, converged, total_it)

    def _result(self, lam, pen, pen_f, norms, converged, n_iter):
        theta = self.theta.copy()
        tnorm = np.linalg.norm(theta, axis=1)
        obj = 0.5 * float(self.r @ self.r) + float(pen_f @ tnorm)
        kkt = 0.0
        for g in self.idx_all:
            if tnorm[g] > 0:
                res = np.linalg.norm(self.grad[g] - pen[g] * theta[g] / tnorm[g])
            else:
                res = max(0.0, norms[g] - pen[g])
            kkt = max(kkt, float(res))
        intercepts, coef = self.design.to_original(theta, self.arm_means)
        flags = [] if converged else ["max_iter reached"]
        if not converged:
            logger.warning("group lasso hit max_iter at lambda=%g (kkt residual %g)", lam, kkt)
        return GroupLassoFit(intercepts, coef, theta, float(lam), self.weights.copy(), obj, kkt,
                             converged, n_iter, flags)


def group_lasso_fit(design: GroupedDesign, y, lam: float, weights=None, tol: float = 1e-7,
                    max_iter: int = 100_000, group_size: str = "T", theta0=None) -> GroupLassoFit:
    """Minimise ``0.5 * ||y - fit||^2 + lam * sqrt(T) * sum_g w_g ||theta_g||``.

    ``theta`` are the coefficients of the standardised design; the returned
    fit also carries intercepts and coefficients on the raw basis scale.
    Groups with infinite weight are held at zero.  Block coordinate descent
    stops when no coefficient moves by ``tol`` or more in a full sweep.
    """
    solver = _PathSolver(design, y, weights, group_size, tol, max_iter)
    return solver.solve(lam, theta0)


def fit_path(design: GroupedDesign, y, lambdas, weights=None, tol: float = 1e-7,
             max_iter: int = 100_000, group_size: str = "T") -> list:
    """Fits along ``lambdas`` (decreasing), each warm-started from the previous one."""
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if np.any(np.diff(lambdas) > 0):
        raise ConfigError("lambda path must be non-increasing")
    solver = _PathSolver(design, y, weights, group_size, tol, max_iter)
    return [solver.solve(float(lam)) for lam in lambdas]


def assign_folds(w: np.ndarray, folds: int, seed) -> np.ndarray:
    """Fold labels, shuffled within each arm and dealt round-robin."""
    rng = np.random.default_rng(seed)
    fold = np.empty(w.shape[0], dtype=np.int64)
    offset = 0
    for t in np.unique(w):
        rows = np.flatnonzero(w == t)
        rows = rows[rng.permutation(rows.size)]
        fold[rows] = (np.arange(rows.size) + offset) % folds
        offset += rows.size
    return fold


@dataclass
class CVResult:
    lambdas: np.ndarray
    mean_error: np.ndarray
    se_error: np.ndarray
    best_index: int
    folds: int

    @property
    def best_lambda(self) -> float:
        return float(self.lambdas[self.best_index])

    def rows(self):
        for k, lam in enumerate(self.lambdas):
            yield {"index": k, "lambda": float(lam), "cv_mse": float(self.mean_error[k]),
                   "cv_se": float(self.se_error[k]), "selected": int(k == self.best_index)}


def cv_select(design: GroupedDesign, y, lambdas, folds: int = 10, weights=None, seed=0,
              tol: float = 1e-7, max_iter: int = 100_000, group_size: str = "T") -> CVResult:
    """K-fold CV over a decreasing penalty path; ties go to the larger penalty."""
    y = np.asarray(y, dtype=np.float64)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if folds < 2:
        raise ConfigError("need at least 2 folds")
    fold = assign_folds(design.w, folds, seed)
    sq = np.zeros((folds, lambdas.size))
    counts = np.zeros(folds)
    for k in range(folds):
        test = fold == k
        if not test.any():
            raise ConfigError(f"fold {k} is empty")
        train = ~test
        missing = set(np.unique(design.w[test])) - set(np.unique(design.w[train]))
        if missing:
            logger.warning("CV fold %d: arms %s absent from the training rows", k, sorted(missing))
        sub = design.subset(np.flatnonzero(train))
        fits = fit_path(sub, y[train], lambdas, weights, tol, max_iter, group_size)
        raw_test, w_test = design.raw[test], design.w[test]
        for m, fit in enumerate(fits):
            err = y[test] - fit.predict(raw_test, w_test)
            sq[k, m] = float(err @ err)
        counts[k] = test.sum()
    mean = sq.sum(axis=0) / counts.sum()
    per_fold = sq / counts[:, None]
    se = per_fold.std(axis=0, ddof=1) / math.sqrt(folds)
    best = int(np.flatnonzero(mean == mean.min())[0])
    return CVResult(lambdas, mean, se, best, folds)


@dataclass
class EnsembleResult:
    fit: GroupLassoFit
    cv: list  # one CVResult per stage
    stage1: GroupLassoFit | None = None


def absolute_tol(y, rel_tol: float) -> float:
    """Coefficient-change threshold scaled to the outcome's spread."""
    sd = float(np.std(y))
    return rel_tol * (sd if sd > 0 else 1.0)


def _cv_fit(design, y, weights, cfg: EnsembleConfig):
    tol = absolute_tol(y, cfg.tol)
    lmax = lambda_max(design, y, weights, cfg.group_size)
    path = lambda_path(lmax, cfg.n_lambda, cfg.lambda_ratio)
    cv = cv_select(design, y, path, cfg.folds, weights, cfg.seed, tol, cfg.max_iter, cfg.group_size)
    fits = fit_path(design, y, path[: cv.best_index + 1], weights, tol, cfg.max_iter, cfg.group_size)
    return fits[-1], cv


def adaptive_weights(theta: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(theta, axis=1)
    with np.errstate(divide="ignore"):
        return np.where(norms > 0, 1.0 / np.where(norms > 0, norms, 1.0), np.inf)


def adaptive_group_lasso(design: GroupedDesign, y, cfg: EnsembleConfig | None = None,
                         stage1: EnsembleResult | None = None) -> EnsembleResult:
    """Two stages: CV group lasso, then CV group lasso with weights 1/||theta_g||.

    Groups zeroed in the first stage get infinite weight and stay zero.  A
    plain group-lasso result for the same design, outcome and config may be
    passed as ``stage1`` to skip recomputing it.
    """
    cfg = cfg or EnsembleConfig(method=ADAPTIVE)
    y = np.asarray(y, dtype=np.float64)
    if stage1 is None:
        stage1, cv1 = _cv_fit(design, y, None, cfg)
    else:
        stage1, cv1 = stage1.fit, stage1.cv[0]
    wts = adaptive_weights(stage1.theta)
    if not np.isfinite(wts).any():
        solver = _PathSolver(design, y, wts, cfg.group_size, absolute_tol(y, cfg.tol), cfg.max_iter)
        fit = solver.solve(0.0)
        fit.flags.append("intercept-only: stage 1 selected no groups")
        return EnsembleResult(fit, [cv1], stage1)
    fit, cv2 = _cv_fit(design, y, wts, cfg)
    return EnsembleResult(fit, [cv1, cv2], stage1)


def fit_ensemble(design: GroupedDesign, y, cfg: EnsembleConfig,
                 stage1: EnsembleResult | None = None) -> EnsembleResult:
    """CV-tuned plain or adaptive group lasso, per ``cfg.method``."""
    y = np.asarray(y, dtype=np.float64)
    if design.n_groups == 0:
        solver = _PathSolver(design, y, None, cfg.group_size, absolute_tol(y, cfg.tol), cfg.max_iter)
        fit = solver.solve(0.0)
        fit.flags.append("empty basis")
        return EnsembleResult(fit, [])
    if cfg.method == ADAPTIVE:
        result = adaptive_group_lasso(design, y, cfg, stage1)
    else:
        fit, cv = _cv_fit(design, y, None, cfg)
        result = EnsembleResult(fit, [cv])
    if not result.fit.converged:
        raise NumericalError(f"group lasso did not converge (kkt residual {result.fit.kkt_residual:g})")
    return result
