import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rulehte import kernels
from rulehte.basis import grouped_design_from_basis
from rulehte.ensemble import (ADAPTIVE, EnsembleConfig, adaptive_group_lasso, adaptive_weights, cv_select,
                              fit_ensemble, fit_path, group_lasso_fit, lambda_max, lambda_path)
from rulehte.errors import ConfigError


def _design(seed, n=40, G=4, A=3, standardize=True):
    rng = np.random.default_rng(seed)
    w = np.arange(n) % A
    rng.shuffle(w)
    raw = rng.standard_normal((n, G))
    raw[:, 0] = raw[:, 0] > 0
    y = raw[:, 0] * (w == 1) * 2 + raw[:, -1] - w + rng.standard_normal(n)
    return grouped_design_from_basis(raw, w, A, standardize=standardize), y


def _objective(design, y, fit, lam, weights=None, group_size=None):
    wts = np.ones(design.n_groups) if weights is None else np.asarray(weights)
    fin = np.isfinite(wts)
    resid = y - fit.predict(design.raw, design.w)
    factor = math.sqrt(design.T)
    return 0.5 * resid @ resid + lam * factor * float(wts[fin] @ np.linalg.norm(fit.theta[fin], axis=1))


def test_lambda_max_hand_instance():
    design = grouped_design_from_basis(np.array([[0.0], [1.0], [0.0], [1.0]]), np.array([0, 0, 1, 1]), 2)
    y = np.array([1.0, 3.0, 2.0, 6.0])
    assert lambda_max(design, y) == pytest.approx(2 * math.sqrt(10), rel=1e-14)


def test_lambda_max_orthogonal_outcome():
    design, _ = _design(0)
    rng = np.random.default_rng(1)
    # project a random vector off the intercept block and every masked column
    M = np.column_stack([design.w == t for t in range(design.n_arms)] + [design.dense()]).astype(float)
    v = rng.standard_normal(design.n)
    y = v - M @ np.linalg.lstsq(M, v, rcond=None)[0]
    assert lambda_max(design, y) <= 1e-12


def test_lambda_max_boundary():
    design, y = _design(2)
    lmax = lambda_max(design, y)
    above = group_lasso_fit(design, y, lmax * (1 + 1e-9))
    assert above.active_groups.size == 0
    np.testing.assert_allclose(above.intercepts, [y[design.w == t].mean() for t in range(3)], rtol=1e-12)
    assert group_lasso_fit(design, y, lmax * 0.99).active_groups.size > 0
    with pytest.raises(ConfigError):
        lambda_max(design, y, np.full(design.n_groups, np.inf))


@pytest.mark.parametrize("standardize", [True, False])
def test_lambda_zero_is_least_squares(standardize):
    design, y = _design(3, n=60, standardize=standardize)
    fit = group_lasso_fit(design, y, 0.0, tol=1e-13)
    M = np.column_stack([(design.w == t).astype(float) for t in range(3)] + [design.dense()])
    beta = np.linalg.lstsq(M, y, rcond=None)[0]
    np.testing.assert_allclose(fit.intercepts, beta[:3], atol=1e-8)
    np.testing.assert_allclose(fit.coef.reshape(-1), beta[3:], atol=1e-8)


@pytest.mark.parametrize("T", [1, 2, 3])
def test_single_orthonormal_group_closed_form(T):
    rng = np.random.default_rng(T)
    A, n = T + 1, 12 * (T + 1)
    w = np.arange(n) % A
    raw = rng.standard_normal((n, 1))
    for t in range(A):
        rows = w == t
        raw[rows, 0] -= raw[rows, 0].mean()
        raw[rows, 0] /= np.linalg.norm(raw[rows, 0])
    design = grouped_design_from_basis(raw, w, A, standardize=False)
    y = rng.standard_normal(n) + 3 * raw[:, 0]
    X = design.standardized_dense()
    np.testing.assert_allclose(X.T @ X, np.eye(A), atol=1e-12)
    z = X.T @ y  # OLS coefficients of an orthonormal block
    for lam in (0.1, 0.5 * np.linalg.norm(z) / math.sqrt(T), 2.0 * np.linalg.norm(z)):
        fit = group_lasso_fit(design, y, lam, tol=1e-14)
        expect = max(0.0, 1 - lam * math.sqrt(T) / np.linalg.norm(z)) * z
        np.testing.assert_allclose(fit.theta[0], expect, atol=1e-10)


def test_standardised_single_group_closed_form():
    design, y = _design(4, G=1)
    X = design.standardized_dense()
    z = X.T @ (y - np.array([y[design.w == t].mean() for t in range(3)])[design.w]) / design.n
    lam = 0.3 * lambda_max(design, y)
    fit = group_lasso_fit(design, y, lam, tol=1e-14)
    expect = max(0.0, 1 - lam * math.sqrt(2) / (design.n * np.linalg.norm(z))) * z
    np.testing.assert_allclose(fit.theta[0], expect, atol=1e-10)


@given(st.integers(0, 10_000), st.floats(0.01, 0.9), st.booleans())
def test_kkt_and_group_sparsity(seed, frac, standardize):
    design, y = _design(seed, standardize=standardize)
    lam = frac * lambda_max(design, y)
    fit = group_lasso_fit(design, y, lam, tol=1e-12)
    assert fit.converged
    assert fit.kkt_residual <= 1e-6
    for g in range(design.n_groups):
        row = fit.coef[g]
        assert np.all(row == 0) or np.linalg.norm(fit.theta[g]) > 0
    r = y - fit.predict(design.raw, design.w)
    grad = kernels.gradients_numpy(design.Bt, design.w, design.n_arms, r)
    pen = lam * math.sqrt(design.T)
    for g in range(design.n_groups):
        nrm = np.linalg.norm(fit.theta[g])
        if nrm > 0:
            np.testing.assert_allclose(grad[g], pen * fit.theta[g] / nrm, atol=1e-6)
        else:
            assert np.linalg.norm(grad[g]) <= pen + 1e-6


def test_infinite_weight_groups_are_zero():
    design, y = _design(5)
    wts = np.array([np.inf, 1.0, np.inf, 0.5])
    fit = group_lasso_fit(design, y, 0.01 * lambda_max(design, y, wts), wts, tol=1e-12)
    assert np.all(fit.coef[[0, 2]] == 0.0)
    assert np.all(fit.coef[[1, 3]] != 0.0)


def test_warm_path_matches_cold_starts():
    design, y = _design(6, n=80, G=6)
    path = lambda_path(lambda_max(design, y), 20, 1e-3)
    warm = fit_path(design, y, path, tol=1e-10)
    for lam, fw in zip(path, warm):
        cold = group_lasso_fit(design, y, lam, tol=1e-10)
        assert abs(fw.objective - cold.objective) <= 1e-6
    with pytest.raises(ConfigError):
        fit_path(design, y, path[::-1])


def test_objective_non_increasing_per_sweep():
    design, y = _design(7, n=80, G=6)
    lam = 0.05 * lambda_max(design, y)
    pen = np.full(design.n_groups, lam * math.sqrt(design.T))
    idx = np.arange(design.n_groups, dtype=np.int64)
    means = np.array([y[design.w == t].mean() for t in range(design.n_arms)])
    objs = []
    for sweeps in range(1, 30):
        r = y - means[design.w]
        theta = np.zeros((design.n_groups, design.n_arms))
        kernels.bcd_numpy(design.Bt, design.w, design.n_arms, r, theta, design.gram, pen, idx, 0.0, sweeps)
        objs.append(0.5 * r @ r + pen @ np.linalg.norm(theta, axis=1))
    assert np.all(np.diff(objs) <= 1e-10)


def test_cv_single_lambda():
    design, y = _design(8)
    cv = cv_select(design, y, [0.5], folds=4)
    assert cv.best_lambda == 0.5 and cv.best_index == 0
    assert len(list(cv.rows())) == 1


def test_cv_pure_noise_prefers_large_lambda():
    hits = 0
    reps = 20
    for seed in range(reps):
        rng = np.random.default_rng(seed)
        n, G = 200, 20
        w = np.arange(n) % 3
        design = grouped_design_from_basis(rng.standard_normal((n, G)), w, 3)
        y = rng.standard_normal(n)
        path = lambda_path(lambda_max(design, y), 100, 1e-3)
        cv = cv_select(design, y, path, folds=10, seed=seed, tol=1e-6)
        # "near the top": within a factor of two of lambda_max
        hits += cv.best_lambda >= 0.5 * path[0]
    assert hits >= 0.8 * reps


def test_cv_penalty_beats_no_penalty():
    rng = np.random.default_rng(9)
    n, G = 60, 15
    w = np.arange(n) % 2
    raw = rng.standard_normal((n, G))
    design = grouped_design_from_basis(raw, w, 2)
    y = raw[:, 0] + rng.standard_normal(n)
    path = np.append(lambda_path(lambda_max(design, y), 30, 1e-3), 0.0)
    cv = cv_select(design, y, path, folds=10, tol=1e-9)
    assert cv.mean_error[-1] > cv.mean_error[cv.best_index]
    assert cv.best_index < path.size - 1


def test_adaptive_weights():
    np.testing.assert_array_equal(adaptive_weights(np.array([[3.0, 4.0], [0.0, 0.0]])), [0.2, np.inf])


def test_equal_norm_weights_rescale_lambda():
    design, y = _design(10)
    c = 2.5
    wts = np.full(design.n_groups, 1 / c)
    assert lambda_max(design, y, wts) == pytest.approx(c * lambda_max(design, y), rel=1e-12)
    lam = 0.2 * lambda_max(design, y)
    plain = group_lasso_fit(design, y, lam, tol=1e-13)
    weighted = group_lasso_fit(design, y, c * lam, wts, tol=1e-13)
    np.testing.assert_allclose(weighted.coef, plain.coef, atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_adaptive_keeps_stage_one_zeros(seed):
    rng = np.random.default_rng(seed)
    n, G = 60, 5
    w = np.arange(n) % 3
    raw = rng.standard_normal((n, G))
    y = 2 * raw[:, 0] * (w == 1) + raw[:, 1] + rng.standard_normal(n)
    design = grouped_design_from_basis(raw, w, 3)
    res = adaptive_group_lasso(design, y, EnsembleConfig(method=ADAPTIVE, n_lambda=30, folds=5, seed=seed))
    assert set(res.fit.active_groups) <= set(res.stage1.active_groups)
    assert 0 in res.fit.active_groups


def test_adaptive_intercept_only_flag():
    rng = np.random.default_rng(0)
    n = 60
    w = np.arange(n) % 2
    design = grouped_design_from_basis(rng.standard_normal((n, 3)), w, 2)
    y = rng.standard_normal(n)
    cfg = EnsembleConfig(method=ADAPTIVE, n_lambda=1, folds=3)
    res = fit_ensemble(design, y, cfg)
    assert res.fit.active_groups.size == 0
    assert any("intercept-only" in f for f in res.fit.flags)


def test_empty_basis():
    design = grouped_design_from_basis(np.zeros((6, 0)), np.array([0, 1, 0, 1, 0, 1]), 2)
    y = np.arange(6.0)
    res = fit_ensemble(design, y, EnsembleConfig())
    np.testing.assert_allclose(res.fit.intercepts, [2.0, 3.0])
    assert "empty basis" in res.fit.flags


def test_config_validation():
    with pytest.raises(ConfigError):
        EnsembleConfig(group_size="2T")
    with pytest.raises(ConfigError):
        EnsembleConfig(folds=1)
