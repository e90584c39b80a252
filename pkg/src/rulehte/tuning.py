"""Grid search over boosting settings scored on a held-out split."""
from __future__ import annotations

import dataclasses
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ConfigError, DataError
from .pipeline import TUNING_GRID, RunConfig, fit_models
from .simbench import subgroup_eval, tune_metric


def holdout_split(w: np.ndarray, fraction: float, seed) -> tuple:
    """(train rows, holdout rows), drawing ``fraction`` of each arm into the holdout."""
    if not 0 < fraction < 1:
        raise ConfigError("holdout fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    hold = []
    for t in np.unique(w):
        rows = np.flatnonzero(w == t)
        k = int(round(fraction * rows.size))
        hold.append(rng.permutation(rows)[:k])
    hold = np.sort(np.concatenate(hold))
    mask = np.ones(w.size, dtype=bool)
    mask[hold] = False
    return np.flatnonzero(mask), hold


def grid_configs(base: RunConfig, grid: dict | None = None) -> list:
    """Configs for the Cartesian product of ``grid`` values (n_trees, mean_size, shrinkage)."""
    grid = grid or TUNING_GRID
    unknown = set(grid) - {f.name for f in dataclasses.fields(RunConfig)}
    if unknown:
        raise ConfigError(f"unknown grid keys {sorted(unknown)}")
    keys = sorted(grid)
    values = [list(grid[k]) for k in keys]
    if any(not v for v in values):
        raise ConfigError("tuning grid is empty")
    return [dataclasses.replace(base, **dict(zip(keys, combo))) for combo in itertools.product(*values)]


@dataclass
class TuneResult:
    rows: list
    best: RunConfig | None


def score_holdout(est: np.ndarray, hold: Dataset, arms, n_groups: int) -> tuple:
    """Summed tuning metric over ``arms`` plus the per-arm values."""
    per_arm = {}
    for t in arms:
        bins = subgroup_eval(est[:, t - 1], hold, t, n_groups)
        try:
            per_arm[t] = tune_metric([b["actual"] for b in bins], [b["estimated"] for b in bins])
        except DataError:
            per_arm[t] = math.inf
    return float(sum(per_arm.values())), per_arm


def tune(data: Dataset, configs, holdout: float = 0.3, arms=None, n_groups: int = 5, seed: int = 0,
         gps=None) -> TuneResult:
    """Fit each config on a training split and score it on the holdout.

    Every config gets the same split.  The winner has the smallest finite
    score; ties go to the earlier config.  ``best`` is None when every
    score is infinite.
    """
    configs = list(configs)
    if not configs:
        raise ConfigError("tuning grid is empty")
    arms = list(arms) if arms else list(range(1, data.T + 1))
    if any(not 1 <= t <= data.T for t in arms):
        raise ConfigError(f"arms must lie in 1..{data.T}")
    train_rows, hold_rows = holdout_split(data.w, holdout, seed)
    train, hold = data.subset(train_rows), data.subset(hold_rows)
    if gps is not None:
        gps = gps[train_rows] if isinstance(gps, np.ndarray) else gps
    # configs differing only in the ensemble method share their rule basis
    fitted = {}
    groups: dict = {}
    for k, cfg in enumerate(configs):
        groups.setdefault(dataclasses.replace(cfg, ensemble="group_lasso"), []).append(k)
    for ks in groups.values():
        for k, res in zip(ks, fit_models(train, [configs[k] for k in ks], gps)):
            fitted[k] = res[0]
    rows = []
    best, best_score = None, math.inf
    for k, cfg in enumerate(configs):
        score, per_arm = score_holdout(fitted[k].hte_matrix(hold.X), hold, arms, n_groups)
        row = {"n_trees": cfg.n_trees, "mean_size": cfg.mean_size, "shrinkage": cfg.shrinkage,
               "method": cfg.method_name, "metric": score}
        row.update({f"metric_arm{t}": v for t, v in per_arm.items()})
        rows.append(row)
        if score < best_score:
            best, best_score = cfg, score
    return TuneResult(rows, best)
