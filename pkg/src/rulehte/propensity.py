"""Generalized propensity scores from a multinomial logistic model."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .data import Dataset
from .errors import DataError


@dataclass(frozen=True)
class GpsModel:
    """Softmax model with arm 0 as the reference class.

    ``coef`` is T x (p+1): column 0 is the intercept of arm t's linear
    predictor, the rest are slopes on the raw covariate scale.
    """

    coef: np.ndarray
    clip_eps: float = 0.01
    converged: bool = True
    n_iter: int = 0
    loglik: float = float("nan")
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        coef = np.atleast_2d(np.asarray(self.coef, dtype=np.float64))
        object.__setattr__(self, "coef", coef)
        if not 0 <= self.clip_eps < 0.5:
            raise ValueError("clip_eps must lie in [0, 0.5)")
        if self.clip_eps * (coef.shape[0] + 1) > 1:
            raise ValueError("clip_eps too large for the number of arms")

    @property
    def T(self) -> int:
        return self.coef.shape[0]

    @property
    def p(self) -> int:
        return self.coef.shape[1] - 1

    @classmethod
    def constant(cls, probs, p: int, clip_eps: float = 0.0) -> "GpsModel":
        """Covariate-free model returning ``probs`` (over arms 0..T) everywhere."""
        probs = np.asarray(probs, dtype=np.float64)
        if np.any(probs <= 0) or abs(probs.sum() - 1) > 1e-9:
            raise ValueError("known propensities must be positive and sum to 1")
        coef = np.zeros((probs.size - 1, p + 1))
        coef[:, 0] = np.log(probs[1:] / probs[0])
        return cls(coef, clip_eps, meta={"known": probs.tolist()})

    def linear_predictors(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.p:
            raise DataError(f"GPS model expects {self.p} covariates, got {X.shape[1]}")
        if not np.all(np.isfinite(X)):
            raise DataError("non-finite covariates passed to GPS model")
        eta = np.zeros((X.shape[0], self.T + 1))
        eta[:, 1:] = self.coef[:, 0] + X @ self.coef[:, 1:].T
        return eta

    def predict_raw(self, X) -> np.ndarray:
        """Unclipped softmax probabilities, n x (T+1)."""
        eta = self.linear_predictors(X)
        return np.exp(eta - logsumexp(eta, axis=1, keepdims=True))

    def predict(self, X) -> np.ndarray:
        return clip_probabilities(self.predict_raw(X), self.clip_eps)

    def to_dict(self) -> dict:
        return {
            "coef": self.coef.tolist(),
            "clip_eps": self.clip_eps,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "loglik": self.loglik,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GpsModel":
        return cls(np.array(d["coef"]), d["clip_eps"], d["converged"], d["n_iter"], d["loglik"], d.get("meta", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "GpsModel":
        return cls.from_dict(json.loads(text))


def clip_probabilities(P: np.ndarray, eps: float) -> np.ndarray:
    """Raise every entry to at least ``eps`` and renormalise rows to 1.

    Entries pushed to the floor stay exactly at ``eps``; the remaining mass
    is shared among the other entries in proportion to their original
    values, repeating until no free entry falls below the floor.  With at
    least two arms every entry then also stays below ``1 - eps``.
    """
    P = np.array(P, dtype=np.float64, ndmin=2)
    if eps <= 0:
        return P / P.sum(axis=1, keepdims=True)
    out = P.copy()
    for i in np.flatnonzero((P < eps).any(axis=1)):
        row = P[i]
        fixed = row < eps
        while True:
            free_mass = 1.0 - eps * fixed.sum()
            scaled = row * free_mass / row[~fixed].sum()
            new_fixed = fixed | (scaled < eps)
            if new_fixed.sum() == fixed.sum():
                break
            fixed = new_fixed
        out[i] = np.where(fixed, eps, np.maximum(scaled, eps))
    return out


def predict_gps(model: GpsModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    P = model.predict(x.reshape(1, -1) if x.ndim == 1 else x)
    return P[0] if x.ndim == 1 else P


def _loglik_grad_hess(B, Xs, Y):
    """Mean log-likelihood, gradient and Hessian in the (T, p+1) parameter block."""
    n = Xs.shape[0]
    eta = np.zeros((n, Y.shape[1]))
    eta[:, 1:] = Xs @ B.T
    lse = logsumexp(eta, axis=1)
    ll = float(np.sum(eta[np.arange(n), Y.argmax(axis=1)] - lse)) / n
    P = np.exp(eta - lse[:, None])[:, 1:]
    resid = Y[:, 1:] - P
    grad = resid.T @ Xs / n
    T, q = B.shape
    H = np.empty((T, q, T, q))
    for s in range(T):
        for t in range(T):
            wgt = P[:, s] * ((s == t) - P[:, t])
            H[s, :, t, :] = (Xs * wgt[:, None]).T @ Xs / n
    return ll, grad, H.reshape(T * q, T * q)


def fit_gps(data: Dataset, tol: float = 1e-8, max_iter: int = 200, clip_eps: float = 0.01) -> GpsModel:
    """Maximum-likelihood multinomial logistic regression of arm on covariates.

    Newton steps with backtracking on the mean log-likelihood, computed on
    internally standardised covariates; the returned coefficients are on the
    raw scale.  Stops once the max-norm of the mean log-likelihood gradient
    drops to ``tol``.  Under (quasi-)separation the likelihood has no
    maximiser and the iteration cap is reached with ``converged=False``.
    """
    counts = np.bincount(data.w, minlength=data.n_arms)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise DataError(f"cannot fit propensity model: arms {missing} absent from data")
    X = data.X
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    keep = sd > 0
    Xs = np.ones((data.n, 1 + int(keep.sum())))
    Xs[:, 1:] = (X[:, keep] - mu[keep]) / sd[keep]
    Y = np.zeros((data.n, data.n_arms))
    Y[np.arange(data.n), data.w] = 1.0

    T, q = data.T, Xs.shape[1]
    B = np.zeros((T, q))
    B[:, 0] = np.log(counts[1:] / counts[0])
    ll, grad, H = _loglik_grad_hess(B, Xs, Y)
    trace = [ll * data.n]
    converged = bool(np.max(np.abs(grad)) <= tol)
    it = 0
    while not converged and it < max_iter:
        it += 1
        g = grad.reshape(-1)
        damping = 0.0
        while True:
            try:
                step = np.linalg.solve(H + damping * np.eye(H.shape[0]), g)
                break
            except np.linalg.LinAlgError:
                damping = max(1e-10, damping * 10)
        step = step.reshape(T, q)
        t = 1.0
        while True:
            B_new = B + t * step
            ll_new, grad_new, H_new = _loglik_grad_hess(B_new, Xs, Y)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-15:
                break
            t *= 0.5
            if t < 1e-12:
                ll_new = ll
                break
        if t < 1e-12 or not np.isfinite(ll_new):
            break
        B, ll, grad, H = B_new, ll_new, grad_new, H_new
        trace.append(ll * data.n)
        converged = bool(np.max(np.abs(grad)) <= tol)
    if not np.all(np.isfinite(B)):
        converged = False
    coef = np.zeros((T, data.p + 1))
    slopes = B[:, 1:] / sd[keep]
    coef[:, 1:][:, keep] = slopes
    coef[:, 0] = B[:, 0] - slopes @ mu[keep]
    return GpsModel(coef, clip_eps, converged, it, ll * data.n, {"loglik_trace": trace})
