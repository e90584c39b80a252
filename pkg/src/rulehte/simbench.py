"""Simulation scenarios, evaluation metrics and the replication benchmark."""
from __future__ import annotations

import csv
import json
import logging
import math
import platform
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import __version__
from .data import BINARY, CONTINUOUS, Dataset
from .errors import ConfigError, DataError, RuleHTEError

logger = logging.getLogger(__name__)

P = 10
RCT = "rct"
OBSERVATIONAL = "observational"
ASSIGNMENTS = (RCT, OBSERVATIONAL)
MAIN_EFFECTS = ("M1", "M2", "M3")
TREATMENT_EFFECTS = ("T1", "T2", "T3")
_CODE_MAIN = {"L": "M1", "S": "M2", "N": "M3"}
_CODE_TREAT = {"L": "T1", "S": "T2", "N": "T3"}

# (beta_1, beta_2, beta_3) per arm 0..4
BETAS = np.array([[2.0, 2.0, 2.0], [-1.0, 2.0, 4.0], [3.0, 3.0, -1.0], [-3.0, 3.0, 1.0], [-1.0, 4.0, 1.0]])

# observational assignment: log f_t(x) = a_t + b_t . (x1..x5)
_ASSIGN_INTERCEPT = np.array([-0.50, -0.75, -1.00, -1.50])
_ASSIGN_SLOPES = np.array([
    [-0.1, -0.2, -0.3, 0.2, -0.7],
    [-0.2, -0.4, -0.6, 0.4, -0.3],
    [-0.2, -0.5, -0.5, 0.5, -0.3],
    [-0.3, -0.4, -0.2, 0.4, -0.1],
])


@dataclass(frozen=True)
class ScenarioSpec:
    T: int = 2
    assignment: str = RCT
    main_effect: str = "M1"
    treatment_effect: str = "T1"
    n_train: int = 1000
    n_test: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.T not in (2, 3, 4):
            raise ConfigError("T must be 2, 3 or 4")
        if self.assignment not in ASSIGNMENTS:
            raise ConfigError(f"assignment must be one of {ASSIGNMENTS}")
        if self.main_effect not in MAIN_EFFECTS:
            raise ConfigError(f"main effect must be one of {MAIN_EFFECTS}")
        if self.treatment_effect not in TREATMENT_EFFECTS:
            raise ConfigError(f"treatment effect must be one of {TREATMENT_EFFECTS}")
        if self.n_train < 1 or self.n_test < 0:
            raise ConfigError("n_train must be >= 1 and n_test >= 0")

    @classmethod
    def from_code(cls, code: str, **kw) -> "ScenarioSpec":
        """``"L-S"`` means linear main effect with stepwise treatment effect."""
        try:
            a, b = code.upper().split("-")
            return cls(main_effect=_CODE_MAIN[a], treatment_effect=_CODE_TREAT[b], **kw)
        except (ValueError, KeyError):
            raise ConfigError(f"bad scenario code {code!r}; expected e.g. 'L-L' or 'N-S'") from None

    @property
    def code(self) -> str:
        inv_m = {v: k for k, v in _CODE_MAIN.items()}
        inv_t = {v: k for k, v in _CODE_TREAT.items()}
        return f"{inv_m[self.main_effect]}-{inv_t[self.treatment_effect]}"

    @property
    def name(self) -> str:
        return f"{self.assignment}/T{self.T}/{self.code}"


def main_effect(X: np.ndarray, kind: str) -> np.ndarray:
    x1, x2, x3, x4, x5 = (X[:, j] for j in range(5))
    if kind == "M1":
        return 0.6 * x1 + 0.9 * x2 + 0.6 * x3 - 0.9 * x4 + 0.6 * x5
    if kind == "M2":
        return (1.2 * ((x1 > -1) & (x3 < 1)) - 1.2 * (x2 < 0.5)
                - 1.2 * ((x3 > -1) & (x5 < 1)) + 1.2 * (x4 > 0.5))
    if kind == "M3":
        return 0.6 * x1 ** 2 + 0.5 * x2 * x3 - 1.2 * np.cos(np.pi * x4 * x5)
    raise ConfigError(f"unknown main effect {kind!r}")


def effect_components(X: np.ndarray, kind: str) -> np.ndarray:
    """n x 3 matrix of the three pieces that the beta vectors weight."""
    x1, x2, x3, x4, x5 = (X[:, j] for j in range(5))
    if kind == "T1":
        cols = (0.5 * x1 + x2, 0.5 * x3 + x4, 0.5 * x5 + x2)
    elif kind == "T2":
        cols = (1.4 * (x1 > 0) - 0.3 * (x2 > 0.5), 1.4 * (x3 > 0) - 0.3 * (x4 > 0.5),
                1.4 * (x5 > 0) - 0.3 * (x2 > 0.5))
    elif kind == "T3":
        cols = (0.75 * np.sin(x1) + x2, 0.75 * np.sin(x3) + x4, 0.75 * np.sin(x5) + x2)
    else:
        raise ConfigError(f"unknown treatment effect {kind!r}")
    return np.column_stack(cols).astype(np.float64)


def arm_effects(X: np.ndarray, kind: str, T: int) -> np.ndarray:
    """n x (T+1) matrix of delta_t(x)."""
    return effect_components(X, kind) @ BETAS[: T + 1].T


def true_hte(X: np.ndarray, kind: str, T: int) -> np.ndarray:
    d = arm_effects(X, kind, T)
    return d[:, 1:] - d[:, :1]


def true_gps(X: np.ndarray, assignment: str, T: int) -> np.ndarray:
    n = X.shape[0]
    if assignment == RCT:
        return np.full((n, T + 1), 1.0 / (T + 1))
    f = np.exp(_ASSIGN_INTERCEPT[:T] + X[:, :5] @ _ASSIGN_SLOPES[:T].T)
    denom = 1.0 + f.sum(axis=1, keepdims=True)
    return np.hstack([1.0 / denom, f / denom])


def draw_covariates(rng: np.random.Generator, n: int) -> np.ndarray:
    X = np.empty((n, P))
    for j in range(P):
        # 1-based odd columns are continuous
        X[:, j] = rng.standard_normal(n) if j % 2 == 0 else rng.binomial(1, 0.5, n)
    return X


def draw_arms(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    u = rng.random(probs.shape[0])
    cum = np.cumsum(probs, axis=1)
    cum[:, -1] = 1.0
    return (u[:, None] >= cum).sum(axis=1).astype(np.int64)


COL_KINDS = tuple(CONTINUOUS if j % 2 == 0 else BINARY for j in range(P))


@dataclass
class SimulatedData:
    train: Dataset
    test: Dataset
    true_hte: np.ndarray  # n_test x T
    true_gps: np.ndarray  # n_test x (T+1)
    train_hte: np.ndarray
    train_gps: np.ndarray


def _draw(rng, spec, n):
    X = draw_covariates(rng, n)
    gps = true_gps(X, spec.assignment, spec.T)
    w = draw_arms(rng, gps)
    delta = arm_effects(X, spec.treatment_effect, spec.T)
    mean = main_effect(X, spec.main_effect) + delta[np.arange(n), w]
    y = mean + rng.standard_normal(n)
    return Dataset(y, w, X, spec.T, COL_KINDS), delta[:, 1:] - delta[:, :1], gps


def generate(spec: ScenarioSpec) -> SimulatedData:
    """Seeded training and test sets with their true effects and propensities."""
    rng = np.random.default_rng(spec.seed)
    train, hte_tr, gps_tr = _draw(rng, spec, spec.n_train)
    if spec.n_test:
        test, hte_te, gps_te = _draw(rng, spec, spec.n_test)
    else:
        test, hte_te, gps_te = train, hte_tr, gps_tr
    return SimulatedData(train, test, hte_te, gps_te, hte_tr, gps_tr)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _pair(true, est):
    true = np.asarray(true, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if true.ndim == 1:
        true = true[:, None]
    if est.ndim == 1:
        est = est[:, None]
    if true.shape != est.shape:
        raise DataError(f"shape mismatch: true {true.shape} vs estimate {est.shape}")
    if true.shape[0] == 0:
        raise DataError("no subjects")
    return true, est


def mpehe(true, est) -> float:
    """Root of the arm-averaged mean squared HTE error."""
    true, est = _pair(true, est)
    return float(math.sqrt(np.mean((true - est) ** 2, axis=0).mean()))


def abs_rel_bias(true, est) -> float:
    """Arm-averaged ``|mean(true - est) / mean(true)|``; arms with zero mean true effect are skipped."""
    true, est = _pair(true, est)
    mt = true.mean(axis=0)
    keep = mt != 0
    if not keep.any():
        raise DataError("absolute relative bias undefined: every arm has zero mean true effect")
    if not keep.all():
        logger.warning("arms %s skipped in relative bias: zero mean true effect", (np.flatnonzero(~keep) + 1).tolist())
    bias = (true - est).mean(axis=0)
    return float(np.mean(np.abs(bias[keep] / mt[keep])))


def best_arm(hte) -> np.ndarray:
    """Index of the best arm over {0 (effect 0), 1..T}; ties go to the lowest index."""
    hte = np.asarray(hte, dtype=np.float64)
    if hte.ndim == 1:
        hte = hte[:, None]
    full = np.hstack([np.zeros((hte.shape[0], 1)), hte])
    return np.argmax(full, axis=1)


def kappa_from_labels(a, b, n_classes: int | None = None) -> float:
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape != b.shape or a.size == 0:
        raise DataError("label vectors must be non-empty and equal length")
    k = n_classes or int(max(a.max(), b.max())) + 1
    n = a.size
    p_o = float(np.mean(a == b))
    p_e = float(np.bincount(a, minlength=k) @ np.bincount(b, minlength=k)) / (n * n)
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return (p_o - p_e) / (1.0 - p_e)


def cohens_kappa(true, est) -> float:
    """Agreement between true and estimated best arms, chance corrected."""
    true, est = _pair(true, est)
    return kappa_from_labels(best_arm(true), best_arm(est), true.shape[1] + 1)


def spearman_rows(true, est) -> tuple:
    """Per-subject Spearman correlations; NaN where either vector is constant."""
    true, est = _pair(true, est)
    rt = rankdata(true, axis=1)
    re = rankdata(est, axis=1)
    rt -= rt.mean(axis=1, keepdims=True)
    re -= re.mean(axis=1, keepdims=True)
    den = np.sqrt((rt * rt).sum(axis=1) * (re * re).sum(axis=1))
    num = (rt * re).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    return rho


def spearman_avg(true, est, return_excluded: bool = False):
    """Mean per-subject Spearman correlation between true and estimated effect rankings.

    Subjects with a constant vector (in either argument) have no defined
    correlation and are left out; ``return_excluded`` also returns their count.
    """
    true, est = _pair(true, est)
    if true.shape[1] < 2:
        raise DataError("rank correlation needs at least two non-control arms")
    rho = spearman_rows(true, est)
    ok = np.isfinite(rho)
    excluded = int((~ok).sum())
    value = float(rho[ok].mean()) if ok.any() else math.nan
    return (value, excluded) if return_excluded else value


@dataclass
class MetricsReport:
    mpehe: float
    abs_rel_bias: float
    kappa: float
    spearman: float
    n_terms: int | None = None
    spearman_excluded: int = 0

    def __post_init__(self):
        if not self.mpehe >= 0 or not self.abs_rel_bias >= 0:
            raise RuleHTEError("metric out of range")
        if not -1 - 1e-12 <= self.kappa <= 1 + 1e-12:
            raise RuleHTEError("kappa out of range")
        if not (math.isnan(self.spearman) or -1 - 1e-12 <= self.spearman <= 1 + 1e-12):
            raise RuleHTEError("spearman out of range")


def evaluate_all(true, est, n_terms=None) -> MetricsReport:
    true, est = _pair(true, est)
    if true.shape[1] >= 2:
        sp, excl = spearman_avg(true, est, return_excluded=True)
    else:
        sp, excl = math.nan, 0
    return MetricsReport(mpehe(true, est), abs_rel_bias(true, est), cohens_kappa(true, est), sp, n_terms, excl)


def subgroup_eval(est_t, data: Dataset, t: int, n_groups: int = 5) -> list:
    """Bins of subjects ordered by estimated effect of arm ``t``.

    Each row reports the bin's mean estimate and the raw difference in mean
    outcome between arm-``t`` and control subjects in the bin (``None`` when
    either is absent).
    """
    est_t = np.asarray(est_t, dtype=np.float64).reshape(-1)
    if n_groups < 2:
        raise ConfigError("n_groups must be >= 2")
    if est_t.shape[0] != data.n:
        raise DataError("one estimate per subject is required")
    if not 1 <= t <= data.T:
        raise ConfigError(f"arm {t} outside 1..{data.T}")
    order = np.argsort(est_t, kind="stable")
    rows = []
    for g, idx in enumerate(np.array_split(order, n_groups)):
        arm = data.w[idx] == t
        ctl = data.w[idx] == 0
        actual = float(data.y[idx][arm].mean() - data.y[idx][ctl].mean()) if arm.any() and ctl.any() else None
        rows.append({"group": g + 1, "n": int(idx.size), "n_arm": int(arm.sum()), "n_control": int(ctl.sum()),
                     "estimated": float(est_t[idx].mean()) if idx.size else None, "actual": actual})
    return rows


def tune_metric(actual, est) -> float:
    """``mean |actual - est| / |Spearman(actual, est)|`` over bins, or ``inf``.

    The metric is infinite when any bin's actual and estimated effects differ
    in sign (zero counts as its own sign) or when the rank correlation is 0
    or undefined.  Bins with a missing value in either vector are dropped.
    """
    a = np.array([math.nan if v is None else v for v in np.asarray(actual, dtype=object).ravel()], dtype=np.float64)
    e = np.array([math.nan if v is None else v for v in np.asarray(est, dtype=object).ravel()], dtype=np.float64)
    if a.shape != e.shape:
        raise DataError("actual and estimate must have equal length")
    ok = np.isfinite(a) & np.isfinite(e)
    a, e = a[ok], e[ok]
    if a.size < 2:
        raise DataError("tuning metric needs at least two complete bins")
    if np.any(np.sign(a) != np.sign(e)):
        return math.inf
    rho = spearman_rows(a[None, :], e[None, :])[0]
    if not np.isfinite(rho) or rho == 0:
        return math.inf
    return float(np.mean(np.abs(a - e)) / abs(rho))


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

METRICS = ("mpehe", "abs_rel_bias", "kappa", "spearman", "n_terms")


def replication_seeds(master_seed: int, scenario: ScenarioSpec, rep: int) -> tuple:
    """(data seed, fit seed) for one replication, independent of run order."""
    tag = zlib.crc32(scenario.name.encode())
    ss = np.random.SeedSequence([master_seed, tag, rep])
    a, b = ss.generate_state(2)
    return int(a), int(b)


@dataclass
class BenchmarkTask:
    scenario: ScenarioSpec
    methods: tuple  # RunConfig instances
    rep: int
    master_seed: int
    gps: str = "fit"


def _run_task(task: BenchmarkTask) -> list:
    from .model import count_terms
    from .pipeline import fit_model, fit_models

    data_seed, fit_seed = replication_seeds(task.master_seed, task.scenario, task.rep)
    spec = ScenarioSpec(**{**asdict(task.scenario), "seed": data_seed})
    out = []
    try:
        sim = generate(spec)
    except RuleHTEError as exc:
        return [(cfg.method_name, None, f"{type(exc).__name__}: {exc}") for cfg in task.methods]
    cfgs = [type(cfg)(**{**cfg.to_dict(), "seed": fit_seed}) for cfg in task.methods]
    gps = sim.train_gps if task.gps == "true" else None
    try:
        fitted = fit_models(sim.train, cfgs, gps=gps)
    except RuleHTEError:
        # retry one by one so a failure in one method does not sink the others
        fitted = []
        for cfg in cfgs:
            try:
                fitted.append(fit_model(sim.train, cfg, gps=gps))
            except RuleHTEError as exc:
                logger.warning("%s rep %d %s failed: %s", spec.name, task.rep, cfg.method_name, exc)
                fitted.append(exc)
    for cfg, res in zip(cfgs, fitted):
        if isinstance(res, Exception):
            out.append((cfg.method_name, None, f"{type(res).__name__}: {res}"))
            continue
        model = res[0]
        try:
            rep = evaluate_all(sim.true_hte, model.hte_matrix(sim.test.X), count_terms(model))
            out.append((cfg.method_name, rep, None))
        except RuleHTEError as exc:
            out.append((cfg.method_name, None, f"{type(exc).__name__}: {exc}"))
    return out


@dataclass
class BenchmarkResult:
    rows: list  # summary rows
    replicates: list  # per-replication rows
    manifest: dict = field(default_factory=dict)

    def summary(self, scenario: str, method: str) -> dict:
        return {r["metric"]: r for r in self.rows if r["scenario"] == scenario and r["method"] == method}


def run_benchmark(scenarios, methods, replications: int = 10, master_seed: int = 0, jobs: int = 1,
                  gps: str = "fit") -> BenchmarkResult:
    """Fit every method on every scenario ``replications`` times and summarise the metrics.

    ``methods`` are :class:`~rulehte.pipeline.RunConfig` objects or short
    names such as ``"gbm.agl"``.  Failed replications are counted, not fatal.
    """
    from .pipeline import RunConfig

    if replications < 1:
        raise ConfigError("replications must be >= 1")
    if gps not in ("fit", "true"):
        raise ConfigError("gps must be 'fit' or 'true'")
    methods = tuple(RunConfig.from_method(m) if isinstance(m, str) else m for m in methods)
    names = [m.method_name for m in methods]
    if len(set(names)) != len(names):
        raise ConfigError("method names must be distinct")
    scenarios = list(scenarios)
    tasks = [BenchmarkTask(s, methods, r, master_seed, gps) for s in scenarios for r in range(replications)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        results = [_run_task(t) for t in tasks]

    replicates = []
    for task, res in zip(tasks, results):
        for name, rep, err in res:
            row = {"scenario": task.scenario.name, "method": name, "replication": task.rep, "error": err or ""}
            for m in METRICS:
                row[m] = getattr(rep, m) if rep is not None else None
            if rep is not None:
                row["spearman_excluded"] = rep.spearman_excluded
            replicates.append(row)

    rows = []
    for s in scenarios:
        for name in names:
            reps = [r for r in replicates if r["scenario"] == s.name and r["method"] == name]
            ok = [r for r in reps if not r["error"]]
            for m in METRICS:
                vals = np.array([r[m] for r in ok if r[m] is not None], dtype=np.float64)
                vals = vals[np.isfinite(vals)]
                mean = float(vals.mean()) if vals.size else math.nan
                sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
                rows.append({"scenario": s.name, "method": name, "metric": m, "mean": mean, "sd": sd,
                             "replications": int(vals.size), "failures": len(reps) - len(ok)})
    manifest = {
        "master_seed": master_seed,
        "replications": replications,
        "gps": gps,
        "scenarios": [asdict(s) for s in scenarios],
        "methods": [m.to_dict() for m in methods],
        "seeds": {s.name: [replication_seeds(master_seed, s, r) for r in range(replications)] for s in scenarios},
        "versions": {"rulehte": __version__, "python": platform.python_version(), "numpy": np.__version__},
    }
    return BenchmarkResult(rows, replicates, manifest)


def _fmt(v):
    if v is None:
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return v


def write_rows(rows: list, path, columns=None) -> None:
    if not rows and not columns:
        raise DataError("nothing to write")
    columns = columns or list(rows[0])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        out.writeheader()
        for r in rows:
            out.writerow({k: _fmt(r.get(k)) for k in columns})


def write_benchmark(result: BenchmarkResult, report_path, manifest_path=None, replicates_path=None) -> None:
    write_rows(result.rows, report_path,
               ["scenario", "method", "metric", "mean", "sd", "replications", "failures"])
    if replicates_path:
        write_rows(result.replicates, replicates_path,
                   ["scenario", "method", "replication", *METRICS, "spearman_excluded", "error"])
    if manifest_path:
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(result.manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
