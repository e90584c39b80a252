"""Fitted rule-ensemble model: per-arm outcomes, HTEs, importances."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .basis import BasisSet, LinearTerm
from .data import Condition, RuleTerm
from .errors import ConfigError, DataError

FORMAT_VERSION = 1


@dataclass(frozen=True)
class FittedModel:
    """Per-arm linear model over a frozen basis of rules and linear terms.

    ``coef[g, t]`` is basis function ``g``'s coefficient for arm ``t`` and
    ``intercepts[t]`` the arm-``t`` intercept.  ``supports`` (one per rule)
    and ``linear_sds`` (one per linear term) are training-set statistics kept
    for the importance measures.
    """

    basis: BasisSet
    intercepts: np.ndarray
    coef: np.ndarray
    supports: np.ndarray
    linear_sds: np.ndarray
    p: int
    names: tuple = ()
    fit_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        icpt = np.array(self.intercepts, dtype=np.float64)
        coef = np.array(self.coef, dtype=np.float64).reshape(len(self.basis), icpt.shape[0])
        supports = np.array(self.supports, dtype=np.float64).reshape(-1)
        sds = np.array(self.linear_sds, dtype=np.float64).reshape(-1)
        if icpt.shape[0] < 2:
            raise ConfigError("a model needs at least two arms")
        if supports.shape[0] != self.basis.n_rules or sds.shape[0] != len(self.basis.linears):
            raise ConfigError("supports / linear_sds do not match the basis")
        for a in (icpt, coef, supports, sds):
            a.setflags(write=False)
        object.__setattr__(self, "intercepts", icpt)
        object.__setattr__(self, "coef", coef)
        object.__setattr__(self, "supports", supports)
        object.__setattr__(self, "linear_sds", sds)
        object.__setattr__(self, "names", tuple(self.names) or tuple(f"x{j + 1}" for j in range(self.p)))

    @property
    def T(self) -> int:
        return self.intercepts.shape[0] - 1

    @property
    def n_arms(self) -> int:
        return self.intercepts.shape[0]

    def _check_arm(self, t, allow_zero=True):
        t = int(t)
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ConfigError(f"arm {t} outside {lo}..{self.T}")
        return t

    def _basis(self, X):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.p:
            raise DataError(f"model expects {self.p} covariates, got {X.shape[1]}")
        return self.basis.evaluate(X), single

    def _contrast(self, X, a, b):
        B, single = self._basis(X)
        out = (self.intercepts[a] - self.intercepts[b]) + B @ (self.coef[:, a] - self.coef[:, b])
        return float(out[0]) if single else out

    def outcomes(self, X) -> np.ndarray:
        """n x (T+1) matrix of predicted outcomes for every arm."""
        B, _ = self._basis(X)
        return self.intercepts + B @ self.coef

    def hte_matrix(self, X) -> np.ndarray:
        """n x T matrix of effects of arms 1..T versus control."""
        B, _ = self._basis(X)
        return (self.intercepts[1:] - self.intercepts[0]) + B @ (self.coef[:, 1:] - self.coef[:, :1])

    def to_dict(self) -> dict:
        def bound(v):
            return None if math.isinf(v) else v

        rules = [[{"j": c.j, "lower": bound(c.lower), "upper": bound(c.upper)} for c in r.conditions]
                 for r in self.basis.rules]
        linears = [{"j": lt.j, "lower": lt.lower, "upper": lt.upper, "scale": lt.scale} for lt in self.basis.linears]
        return {
            "format_version": FORMAT_VERSION,
            "p": self.p,
            "T": self.T,
            "names": list(self.names),
            "rules": rules,
            "linears": linears,
            "intercepts": self.intercepts.tolist(),
            "coef": self.coef.tolist(),
            "supports": self.supports.tolist(),
            "linear_sds": self.linear_sds.tolist(),
            "fit_meta": self.fit_meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedModel":
        if d.get("format_version") != FORMAT_VERSION:
            raise DataError(f"unsupported model format version {d.get('format_version')!r}")

        def bound(v, default):
            return default if v is None else float(v)

        rules = [RuleTerm(tuple(Condition(int(c["j"]), bound(c["lower"], -math.inf), bound(c["upper"], math.inf))
                                for c in r)) for r in d["rules"]]
        linears = [LinearTerm(int(l["j"]), float(l["lower"]), float(l["upper"]), float(l["scale"]))
                   for l in d["linears"]]
        coef = np.array(d["coef"], dtype=np.float64).reshape(len(rules) + len(linears), int(d["T"]) + 1)
        return cls(BasisSet(rules, linears), np.array(d["intercepts"]), coef, np.array(d["supports"]),
                   np.array(d["linear_sds"]), int(d["p"]), tuple(d["names"]), dict(d.get("fit_meta", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FittedModel":
        try:
            return cls.from_dict(json.loads(text))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"malformed model file: {exc}") from exc


def save_model(model: FittedModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(model.to_json())


def load_model(path) -> FittedModel:
    with open(path, encoding="utf-8") as fh:
        return FittedModel.from_json(fh.read())


def predict_outcome(m: FittedModel, x, t: int):
    """Predicted outcome under arm ``t``; scalar for one ``x``, vector for a matrix."""
    t = m._check_arm(t)
    B, single = m._basis(x)
    out = m.intercepts[t] + B @ m.coef[:, t]
    return float(out[0]) if single else out


def predict_hte(m: FittedModel, x, t: int):
    """Effect of arm ``t >= 1`` versus control."""
    if int(t) == 0:
        raise ConfigError("the control arm's effect is identically 0; use control_hte")
    t = m._check_arm(t, allow_zero=False)
    return m._contrast(x, t, 0)


def control_hte(x):
    """The control arm's effect versus itself: 0 for every input."""
    x = np.asarray(x, dtype=np.float64)
    return 0.0 if x.ndim == 1 else np.zeros(x.shape[0])


def pairwise_hte(m: FittedModel, x, t1: int, t2: int):
    """Effect of arm ``t1`` versus arm ``t2``."""
    t1, t2 = m._check_arm(t1), m._check_arm(t2)
    if t1 == t2:
        raise ConfigError("pairwise comparison needs two different arms")
    return m._contrast(x, t1, t2)


def base_importance(m: FittedModel, t1: int, t2: int = 0) -> np.ndarray:
    """Importance of each basis function for the ``t1`` versus ``t2`` contrast.

    Rules: ``|coef difference| * sqrt(s (1 - s))`` with ``s`` the training
    support.  Linear terms: ``|coef difference| * SD`` of the term.
    """
    t1, t2 = m._check_arm(t1), m._check_arm(t2)
    if t1 == t2:
        raise ConfigError("importance needs two different arms")
    diff = np.abs(m.coef[:, t1] - m.coef[:, t2])
    spread = np.concatenate([np.sqrt(m.supports * (1.0 - m.supports)), m.linear_sds])
    return diff * spread


def variable_importance(m: FittedModel, t1: int, t2: int = 0) -> np.ndarray:
    """Per-covariate importance; each rule's importance is split evenly over its covariates."""
    imp = base_importance(m, t1, t2)
    out = np.zeros(m.p)
    for g, rule in enumerate(m.basis.rules):
        vars_ = rule.variables
        for j in vars_:
            out[j] += imp[g] / len(vars_)
    for k, lt in enumerate(m.basis.linears):
        out[lt.j] += imp[m.basis.n_rules + k]
    return out


def count_terms(m: FittedModel) -> int:
    return int(np.count_nonzero(np.any(m.coef != 0, axis=1)))


def importance_rows(m: FittedModel, t1: int, t2: int = 0, include_zero: bool = False) -> list:
    """Rows of the importance report, most important first."""
    imp = base_importance(m, t1, t2)
    rows = []
    for g in range(len(m.basis)):
        if not include_zero and not np.any(m.coef[g] != 0):
            continue
        is_rule = g < m.basis.n_rules
        row = {
            "kind": "rule" if is_rule else "linear",
            "definition": m.basis.describe(g, m.names),
            "t1": t1,
            "t2": t2,
            "importance": float(imp[g]),
            "support": float(m.supports[g]) if is_rule else "",
        }
        for t in range(m.n_arms):
            row[f"coef_arm{t}"] = float(m.coef[g, t])
        rows.append(row)
    rows.sort(key=lambda r: -r["importance"])  # stable, so ties keep basis order
    return rows


def write_importance(m: FittedModel, path, t1: int, t2: int = 0, include_zero: bool = False) -> None:
    rows = importance_rows(m, t1, t2, include_zero)
    cols = ["kind", "definition", "t1", "t2", "importance", "support"] + [f"coef_arm{t}" for t in range(m.n_arms)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        out.writeheader()
        for r in rows:
            out.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_variable_importance(m: FittedModel, path, t1: int, t2: int = 0) -> None:
    imp = variable_importance(m, t1, t2)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["variable", "t1", "t2", "importance"])
        for j in np.argsort(-imp, kind="stable"):
            out.writerow([m.names[j], t1, t2, repr(float(imp[j]))])
