"""Multi-target tree boosting on transformed outcomes and rule extraction."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import kernels
from .data import Condition, Dataset, RuleTerm, rule_matrix
from .errors import ConfigError

GBM = "gbm"
CTREE = "ctree"
LEARNERS = (GBM, CTREE)


@dataclass
class TreeNode:
    value: np.ndarray
    n_rows: int
    split: tuple | None = None  # (j, v); left child holds x_j < v
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.split is None

    def nodes(self):
        """Pre-order traversal (node, left before right)."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            if not node.is_leaf:
                stack.append(node.right)
                stack.append(node.left)

    @property
    def n_leaves(self) -> int:
        return sum(1 for nd in self.nodes() if nd.is_leaf)

    @property
    def n_nodes(self) -> int:
        return sum(1 for _ in self.nodes())

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.empty((X.shape[0], self.value.shape[0]))
        self._fill(X, np.arange(X.shape[0]), out)
        return out

    def _fill(self, X, rows, out):
        if self.is_leaf:
            out[rows] = self.value
            return
        j, v = self.split
        go_left = X[rows, j] < v
        self.left._fill(X, rows[go_left], out)
        self.right._fill(X, rows[~go_left], out)

    def to_dict(self) -> dict:
        d = {"value": self.value.tolist(), "n_rows": self.n_rows}
        if not self.is_leaf:
            d["split"] = {"j": int(self.split[0]), "threshold": float(self.split[1])}
            d["left"] = self.left.to_dict()
            d["right"] = self.right.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TreeNode":
        node = cls(np.array(d["value"], dtype=np.float64), d["n_rows"])
        if "split" in d:
            node.split = (d["split"]["j"], d["split"]["threshold"])
            node.left = cls.from_dict(d["left"])
            node.right = cls.from_dict(d["right"])
        return node


@dataclass(frozen=True)
class BoostConfig:
    n_trees: int = 333
    mean_size: float = 2.0
    shrinkage: float = 0.01
    learner: str = GBM
    min_node_size: int = 10
    subsample: float = 0.5
    alpha: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigError("n_trees must be >= 1")
        if not self.mean_size >= 2:
            raise ConfigError("mean tree size must be >= 2")
        if not 0 <= self.shrinkage <= 1:
            raise ConfigError("shrinkage must lie in [0, 1]")
        if self.learner not in LEARNERS:
            raise ConfigError(f"learner must be one of {LEARNERS}")
        if self.min_node_size < 1:
            raise ConfigError("min_node_size must be >= 1")
        if not 0 < self.subsample <= 1:
            raise ConfigError("subsample must lie in (0, 1]")
        if not 0 < self.alpha <= 1:
            raise ConfigError("alpha must lie in (0, 1]")


def sample_tree_size(mean_size: float, rng: np.random.Generator) -> int:
    """Leaf budget ``2 + floor(omega)`` with ``omega`` exponential of mean ``mean_size - 2``."""
    if mean_size < 2:
        raise ConfigError(f"mean tree size must be >= 2, got {mean_size}")
    if mean_size <= 2 + 1e-12:
        return 2
    return 2 + int(math.floor(rng.exponential(mean_size - 2)))


def _target_weights(R: np.ndarray, rows: np.ndarray) -> np.ndarray:
    sd = R[rows].std(axis=0)
    u = np.zeros_like(sd)
    pos = sd > 0
    u[pos] = 1.0 / sd[pos] ** 2
    return u


def _ctree_covariate(X, rows, R, alpha):
    """Covariate with the strongest correlation to any target, if significant.

    Pearson correlation t-tests for every (covariate, target) pair, with a
    Bonferroni correction over all of them.  Returns -1 when nothing passes.
    """
    m = rows.shape[0]
    if m < 3:
        return -1
    Xn = X[rows]
    Rn = R[rows]
    xc = Xn - Xn.mean(axis=0)
    rc = Rn - Rn.mean(axis=0)
    xs = np.sqrt((xc * xc).sum(axis=0))
    rs = np.sqrt((rc * rc).sum(axis=0))
    ok = (xs[:, None] > 0) & (rs[None, :] > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(ok, (xc.T @ rc) / (xs[:, None] * rs[None, :]), 0.0)
    corr = np.clip(corr, -1.0, 1.0)
    df = m - 2
    with np.errstate(divide="ignore"):
        tstat = np.abs(corr) * np.sqrt(df / np.maximum(1.0 - corr * corr, 1e-300))
    best = np.unravel_index(int(np.argmax(tstat)), tstat.shape)
    if tstat[best] <= 0:
        return -1
    pval = 2.0 * stats.t.sf(tstat[best], df)
    if min(1.0, pval * tstat.size) > alpha:
        return -1
    return int(best[0])


def fit_tree(
    X: np.ndarray,
    R: np.ndarray,
    rows: np.ndarray,
    size: int,
    learner: str = GBM,
    min_node_size: int = 10,
    alpha: float = 0.05,
) -> TreeNode:
    """Grow a multi-target regression tree with at most ``size`` leaves.

    Leaves are expanded best-first by split gain.  The gain is the summed
    per-target reduction in squared error, each target weighted by the
    inverse variance of its residuals over ``rows``.  With ``learner="ctree"``
    a node may only split on the covariate selected by a Bonferroni-adjusted
    correlation test at level ``alpha``.  Leaf values are per-target means.
    """
    if size < 2:
        raise ConfigError("tree size must be >= 2")
    if learner not in LEARNERS:
        raise ConfigError(f"unknown learner {learner!r}")
    X = np.ascontiguousarray(X, dtype=np.float64)
    R = np.ascontiguousarray(R, dtype=np.float64)
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    u = _target_weights(R, rows)
    all_cols = np.arange(X.shape[1], dtype=np.int64)
    scale = float(u @ (R[rows] ** 2).sum(axis=0))
    min_gain = 1e-12 * max(scale, 1e-300)

    def candidate(node_rows):
        if node_rows.shape[0] < 2 * min_node_size or not u.any():
            return None
        if learner == CTREE:
            j = _ctree_covariate(X, node_rows, R, alpha)
            if j < 0:
                return None
            cols = np.array([j], dtype=np.int64)
        else:
            cols = all_cols
        gain, j, v = kernels.best_split(X, node_rows, R, u, cols, min_node_size)
        if j < 0 or gain <= min_gain:
            return None
        return gain, j, v

    def make(node_rows):
        return TreeNode(R[node_rows].mean(axis=0), int(node_rows.shape[0]))

    root = make(rows)
    heap = []
    counter = 0
    cand = candidate(rows)
    if cand is not None:
        heap.append((-cand[0], counter, root, rows, cand))
    n_leaves = 1
    while heap and n_leaves < size:
        _, _, node, node_rows, (gain, j, v) = heapq.heappop(heap)
        go_left = X[node_rows, j] < v
        lrows, rrows = node_rows[go_left], node_rows[~go_left]
        node.split = (int(j), float(v))
        node.left, node.right = make(lrows), make(rrows)
        n_leaves += 1
        for child, crow in ((node.left, lrows), (node.right, rrows)):
            c = candidate(crow)
            if c is not None:
                counter += 1
                heapq.heappush(heap, (-c[0], counter, child, crow, c))
    return root


@dataclass
class BoostResult:
    trees: list
    init: np.ndarray
    sizes: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)


def boost(Z: np.ndarray, data: Dataset, cfg: BoostConfig) -> BoostResult:
    """Least-squares gradient boosting of the T-column target ``Z``.

    Residuals start at ``Z`` minus its column means.  Each tree is grown on
    a row subsample with a randomly drawn leaf budget, then every row's
    residual is reduced by ``shrinkage`` times the tree's prediction.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    X = np.ascontiguousarray(data.X)
    rng = np.random.default_rng(cfg.seed)
    init = Z.mean(axis=0)
    R = Z - init
    n = X.shape[0]
    n_sub = max(1, int(math.floor(cfg.subsample * n)))
    res = BoostResult([], init)
    for _ in range(cfg.n_trees):
        size = sample_tree_size(cfg.mean_size, rng)
        if n_sub < n:
            rows = np.sort(rng.choice(n, size=n_sub, replace=False))
        else:
            rows = np.arange(n)
        tree = fit_tree(X, R, rows, size, cfg.learner, cfg.min_node_size, cfg.alpha)
        if cfg.shrinkage > 0 and not tree.is_leaf:
            R = R - cfg.shrinkage * tree.predict(X)
        elif cfg.shrinkage > 0:
            R = R - cfg.shrinkage * tree.value
        res.trees.append(tree)
        res.sizes.append(size)
        res.train_loss.append(float((R * R).sum()))
    return res


def extract_rules(tree: TreeNode) -> list:
    """One rule per non-root node: the conjunction of its root path, merged per covariate."""
    rules = []

    def walk(node, path):
        if node.is_leaf:
            return
        j, v = node.split
        for child, cond in ((node.left, Condition(j, -math.inf, v)), (node.right, Condition(j, v, math.inf))):
            p = path + [cond]
            rules.append(RuleTerm.from_conditions(p))
            walk(child, p)

    walk(tree, [])
    return rules


def dedupe_rules(rules, data: Dataset) -> list:
    """Drop repeated rules (first occurrence wins) and rules constant on ``data``."""
    seen = set()
    unique = []
    for r in rules:
        if r.key in seen:
            continue
        seen.add(r.key)
        unique.append(r)
    if not unique:
        return []
    support = rule_matrix(unique, data.X).mean(axis=0)
    return [r for r, s in zip(unique, support) if 0.0 < s < 1.0]
