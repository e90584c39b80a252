"""End-to-end fitting: GPS, transformed outcomes, rules, basis, ensemble."""
from __future__ import annotations

import contextlib
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import ensemble as ens
from .basis import BasisSet, build_grouped_design, fit_linear_terms
from .data import Dataset, rule_matrix
from .errors import ConfigError, RuleHTEError
from .model import FittedModel
from .propensity import GpsModel, fit_gps
from .rulegen import LEARNERS, BoostConfig, boost, dedupe_rules, extract_rules
from .transform import transform_outcomes

logger = logging.getLogger(__name__)

TUNING_GRID = {"n_trees": (333, 666, 1000), "mean_size": (2, 3, 4), "shrinkage": (0.1, 0.01, 0.001)}


@dataclass(frozen=True)
class RunConfig:
    learner: str = "gbm"
    ensemble: str = ens.GROUP_LASSO
    n_trees: int = 333
    mean_size: float = 2.0
    shrinkage: float = 0.01
    q: float = 0.025
    clip_eps: float = 0.01
    cv_folds: int = 10
    n_lambda: int = 100
    lambda_ratio: float = 1e-3
    min_node_size: int = 10
    subsample: float = 0.5
    alpha: float = 0.05
    tol: float = 1e-4
    max_iter: int = 100_000
    group_size: str = "T"
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.learner not in LEARNERS:
            raise ConfigError(f"learner must be one of {LEARNERS}")
        if self.ensemble not in ens.METHODS:
            raise ConfigError(f"ensemble must be one of {ens.METHODS}")
        if not 0 <= self.q < 0.5:
            raise ConfigError("q must lie in [0, 0.5)")
        if not 0 <= self.clip_eps < 0.5:
            raise ConfigError("clip_eps must lie in [0, 0.5)")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        # field-level ranges are enforced by the stage configs
        self.boost_config(0)
        self.ensemble_config(0)

    def boost_config(self, seed) -> BoostConfig:
        return BoostConfig(self.n_trees, self.mean_size, self.shrinkage, self.learner,
                           self.min_node_size, self.subsample, self.alpha, seed)

    def ensemble_config(self, seed) -> ens.EnsembleConfig:
        return ens.EnsembleConfig(self.ensemble, self.n_lambda, self.lambda_ratio, self.cv_folds,
                                  self.tol, self.max_iter, self.group_size, seed)

    @property
    def method_name(self) -> str:
        return f"{self.learner}.{'agl' if self.ensemble == ens.ADAPTIVE else 'gl'}"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_method(cls, method: str, **kw) -> "RunConfig":
        """Config from a short method name such as ``gbm.agl``."""
        try:
            learner, kind = method.split(".")
            ensemble = {"gl": ens.GROUP_LASSO, "agl": ens.ADAPTIVE}[kind]
        except (ValueError, KeyError):
            raise ConfigError(f"unknown method {method!r}; expected <gbm|ctree>.<gl|agl>") from None
        return cls(learner=learner, ensemble=ensemble, **kw)


@contextlib.contextmanager
def stage(name: str):
    """Prefix errors raised inside the block with the pipeline stage name."""
    try:
        yield
    except RuleHTEError as exc:
        raise type(exc)(f"[{name}] {exc}") from exc
    except (ValueError, ArithmeticError) as exc:
        raise RuleHTEError(f"[{name}] {type(exc).__name__}: {exc}") from exc


@dataclass
class FitReport:
    n_rules_generated: int = 0
    n_rules: int = 0
    n_linear: int = 0
    n_active_terms: int = 0
    lam: float = 0.0
    gps_converged: bool = True
    cv: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    dropped_linear: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "n_rules_generated": self.n_rules_generated,
            "n_rules_after_dedup": self.n_rules,
            "n_linear_terms": self.n_linear,
            "n_active_terms": self.n_active_terms,
            "lambda": self.lam,
            "gps_converged": self.gps_converged,
            "dropped_linear": self.dropped_linear,
            "flags": self.flags,
        }


def stage_seeds(seed: int) -> tuple:
    boost_ss, cv_ss = np.random.SeedSequence(seed).spawn(2)
    return int(boost_ss.generate_state(1)[0]), int(cv_ss.generate_state(1)[0])


def _prepare(data: Dataset, cfg: RunConfig, gps):
    report = FitReport()
    boost_seed, _ = stage_seeds(cfg.seed)
    with stage("propensity"):
        if gps is None:
            gps = fit_gps(data, clip_eps=cfg.clip_eps)
            report.gps_converged = gps.converged
            if not gps.converged:
                report.flags.append("GPS fit did not converge")
    with stage("transform"):
        Z = transform_outcomes(data, gps)
    with stage("rulegen"):
        res = boost(Z, data, cfg.boost_config(boost_seed))
        raw_rules = [r for tree in res.trees for r in extract_rules(tree)]
        rules = dedupe_rules(raw_rules, data)
        report.n_rules_generated = len(raw_rules)
        report.n_rules = len(rules)
    with stage("basis"):
        dropped: list = []
        linears = fit_linear_terms(data, cfg.q, dropped)
        report.dropped_linear = [data.names[j] for j in dropped]
        report.n_linear = len(linears)
        design = build_grouped_design(data, rules, linears, cfg.standardize)
    return rules, linears, design, report


def _finish(data, cfg, rules, linears, result, report):
    fit = result.fit
    report.cv = result.cv
    report.lam = fit.lam
    report.flags.extend(fit.flags)
    report.n_active_terms = int(fit.active_groups.size)
    supports = rule_matrix(rules, data.X).mean(axis=0) if rules else np.zeros(0)
    linear_sds = np.array([lt.evaluate(data.X).std() for lt in linears])
    meta = {"learner": cfg.learner, "ensemble": cfg.ensemble, "lambda": fit.lam, "seed": cfg.seed,
            "config": cfg.to_dict()}
    model = FittedModel(BasisSet(rules, linears), fit.intercepts, fit.coef, supports, linear_sds,
                        data.p, data.names, meta)
    return model, report


def fit_model(data: Dataset, cfg: RunConfig | None = None, gps=None) -> tuple:
    """Fit the full model on ``data``.

    ``gps`` may be a :class:`GpsModel` or an n x (T+1) array of known
    propensities; by default a multinomial logistic GPS is fitted.
    Returns ``(model, report)``.
    """
    return fit_models(data, [cfg or RunConfig()], gps)[0]


def fit_models(data: Dataset, cfgs, gps=None) -> list:
    """Fit several configs on the same data, sharing work where they agree.

    Configs that differ only in the ensemble method reuse one rule basis,
    and the adaptive fit reuses the plain group-lasso fit as its first
    stage.  Results equal those of separate :func:`fit_model` calls.
    """
    prepared: dict = {}
    plain: dict = {}
    out = []
    for cfg in cfgs:
        key = dataclasses.replace(cfg, ensemble=ens.GROUP_LASSO)
        if key not in prepared:
            prepared[key] = _prepare(data, cfg, gps)
        rules, linears, design, base_report = prepared[key]
        report = dataclasses.replace(base_report, flags=list(base_report.flags))
        _, cv_seed = stage_seeds(cfg.seed)
        ecfg = cfg.ensemble_config(cv_seed)
        with stage("ensemble"):
            if key not in plain:
                plain[key] = ens.fit_ensemble(design, data.y, dataclasses.replace(ecfg, method=ens.GROUP_LASSO))
            result = plain[key] if cfg.ensemble == ens.GROUP_LASSO else \
                ens.fit_ensemble(design, data.y, ecfg, plain[key])
        out.append(_finish(data, cfg, rules, linears, result, report))
    return out
