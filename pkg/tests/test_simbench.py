import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rulehte.data import Dataset
from rulehte.errors import ConfigError, DataError
from rulehte.pipeline import RunConfig
from rulehte.simbench import (BETAS, OBSERVATIONAL, RCT, MetricsReport, ScenarioSpec, abs_rel_bias, best_arm,
                              cohens_kappa, draw_arms, draw_covariates, evaluate_all, generate,
                              kappa_from_labels, main_effect, mpehe, replication_seeds, run_benchmark,
                              spearman_avg, subgroup_eval, true_gps, true_hte, tune_metric, write_benchmark)


def test_rct_arm_frequencies():
    sim = generate(ScenarioSpec(n_train=10_000, n_test=0, seed=5))
    freq = np.bincount(sim.train.w, minlength=3) / 10_000
    se = math.sqrt((1 / 3) * (2 / 3) / 10_000)
    assert np.all(np.abs(freq - 1 / 3) <= 3 * se)


def test_generator_shapes_and_arms():
    for T in (2, 3, 4):
        sim = generate(ScenarioSpec(T=T, assignment=OBSERVATIONAL, n_train=300, n_test=200, seed=T))
        assert sim.train.X.shape == (300, 10) and sim.test.X.shape == (200, 10)
        assert sim.train.w.max() <= T
        assert sim.true_hte.shape == (200, T) and sim.true_gps.shape == (200, T + 1)


def test_main_effect_zero_input():
    for kind in ("M1",):
        assert main_effect(np.zeros((1, 10)), kind)[0] == 0.0


def test_linear_effect_hand_example():
    # x1=0, x2=1 -> 0.5x1+x2 = 1; x3=0, x4=1 -> 1; x5=0 -> 0.5x5+x2 = 1
    x = np.zeros((1, 10))
    x[0, [1, 3]] = 1.0
    assert true_hte(x, "T1", 2)[0, 0] == -1.0
    np.testing.assert_array_equal(true_hte(x, "T1", 4)[0], BETAS[1:].sum(axis=1) - 6.0)


def test_covariate_moments():
    X = draw_covariates(np.random.default_rng(0), 50_000)
    n = X.shape[0]
    for j in range(0, 10, 2):
        assert abs(X[:, j].mean()) <= 4 / math.sqrt(n)
        assert abs(X[:, j].var() - 1) <= 4 * math.sqrt(2 / n)
    for j in range(1, 10, 2):
        assert set(np.unique(X[:, j])) == {0.0, 1.0}
        assert abs(X[:, j].mean() - 0.5) <= 4 * 0.5 / math.sqrt(n)


def test_observational_frequencies_at_origin():
    probs = true_gps(np.zeros((1, 10)), OBSERVATIONAL, 3)[0]
    rng = np.random.default_rng(1)
    n = 40_000
    w = draw_arms(rng, np.tile(probs, (n, 1)))
    freq = np.bincount(w, minlength=4) / n
    assert np.all(np.abs(freq - probs) <= 4 * np.sqrt(probs * (1 - probs) / n))


def test_generate_is_seeded():
    a = generate(ScenarioSpec.from_code("N-S", seed=3, n_train=50, n_test=20))
    b = generate(ScenarioSpec.from_code("N-S", seed=3, n_train=50, n_test=20))
    np.testing.assert_array_equal(a.train.y, b.train.y)
    np.testing.assert_array_equal(a.true_hte, b.true_hte)


def test_scenario_codes():
    s = ScenarioSpec.from_code("L-L")
    assert (s.main_effect, s.treatment_effect) == ("M1", "T1")
    s = ScenarioSpec.from_code("N-S")
    assert (s.main_effect, s.treatment_effect) == ("M3", "T2")
    assert s.name == "rct/T2/N-S"
    with pytest.raises(ConfigError):
        ScenarioSpec.from_code("L-X")
    with pytest.raises(ConfigError):
        ScenarioSpec(T=5)


def test_mpehe_examples():
    t = np.array([[1.0], [2.0]])
    assert mpehe(t, t) == 0.0
    assert mpehe([[0.0], [0.0]], [[1.0], [-1.0]]) == 1.0
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((10, 3)), rng.standard_normal((10, 3))
    assert mpehe(a, a + 2 * (b - a)) == pytest.approx(2 * mpehe(a, b), rel=1e-14)
    with pytest.raises(DataError):
        mpehe(np.zeros((3, 2)), np.zeros((3, 1)))


def test_abs_rel_bias_examples():
    t = np.array([[1.0], [3.0]])
    assert abs_rel_bias(t, t) == 0.0
    assert abs_rel_bias(t, np.array([[0.0], [2.0]])) == 0.5
    assert abs_rel_bias(t, np.array([[0.5], [1.5]]) + np.array([[0.2], [-0.2]])) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(DataError):
        abs_rel_bias(np.array([[1.0], [-1.0]]), np.zeros((2, 1)))
    # an arm with zero mean true effect is skipped
    assert abs_rel_bias(np.array([[1.0, 1.0], [3.0, -1.0]]), np.array([[0.0, 5.0], [2.0, 5.0]])) == 0.5


def test_kappa_examples():
    assert kappa_from_labels([1, 1, 2, 2], [1, 2, 2, 2]) == 0.5
    t = np.array([[1.0, -1.0], [-1.0, 2.0], [-1.0, -2.0]])
    assert cohens_kappa(t, t) == 1.0
    np.testing.assert_array_equal(best_arm(t), [1, 2, 0])
    np.testing.assert_array_equal(best_arm(np.array([[0.0, 0.0]])), [0])
    assert kappa_from_labels([1, 1], [1, 1]) == 1.0
    rng = np.random.default_rng(0)
    assert abs(kappa_from_labels(rng.integers(0, 2, 200_000), rng.integers(0, 2, 200_000))) < 0.01


def test_spearman_examples():
    assert spearman_avg([[1.0, 2.0, 3.0]], [[1.0, 3.0, 2.0]]) == 0.5
    rng = np.random.default_rng(0)
    t = rng.standard_normal((20, 4))
    assert spearman_avg(t, np.exp(t) * 3) == 1.0
    assert spearman_avg(t, -t) == -1.0
    value, excluded = spearman_avg([[1.0, 1.0], [1.0, 2.0]], [[1.0, 2.0], [0.0, 5.0]], return_excluded=True)
    assert (value, excluded) == (1.0, 1)
    with pytest.raises(DataError):
        spearman_avg([[1.0]], [[1.0]])


@given(st.integers(0, 10_000))
def test_rank_metrics_invariant_to_increasing_transform(seed):
    rng = np.random.default_rng(seed)
    t = rng.standard_normal((30, 3))
    e = rng.standard_normal((30, 3))
    # strictly increasing map that fixes 0, so the control arm's value is preserved
    f = lambda v: np.sign(v) * np.abs(v) ** 3 * 2
    assert spearman_avg(t, f(e)) == pytest.approx(spearman_avg(t, e), abs=1e-12)
    assert cohens_kappa(t, f(e)) == cohens_kappa(t, e)
    rep = evaluate_all(t, e, 3)
    assert rep.mpehe >= 0 and -1 <= rep.kappa <= 1 and -1 <= rep.spearman <= 1


def test_metrics_report_bounds():
    with pytest.raises(Exception):
        MetricsReport(-1.0, 0.0, 0.0, 0.0)
    with pytest.raises(Exception):
        MetricsReport(0.0, 0.0, 1.5, 0.0)


def test_tune_metric_examples():
    assert tune_metric([1, 2, 3], [1, 2, 3]) == 0.0
    assert tune_metric([1, -2, 3], [1, 2, 3]) == math.inf
    assert tune_metric([1, 2, 3, 4, 5], [1.1, 2.1, 3.1, 4.1, 5.1]) == pytest.approx(0.1, abs=1e-12)
    assert tune_metric([1, None, 3, 4], [2, 5, 3, 1]) == pytest.approx((1 + 0 + 3) / 3 / 0.5, abs=1e-12)
    assert tune_metric([0, 2, 3], [0, 2, 3]) == 0.0
    assert tune_metric([0, 2, 3], [1, 2, 3]) == math.inf
    assert tune_metric([1, 1, 1], [1, 2, 3]) == math.inf
    with pytest.raises(DataError):
        tune_metric([1, None], [1, 2])


@given(st.lists(st.floats(0.1, 10), min_size=3, max_size=6, unique=True), st.floats(0.1, 10))
def test_tune_metric_scale_covariant(actual, c):
    a = np.array(actual)
    e = a * 1.3 + 0.05
    m = tune_metric(a, e)
    assert tune_metric(c * a, c * e) == pytest.approx(c * m, rel=1e-9)


def test_subgroup_eval_contract():
    rng = np.random.default_rng(0)
    n = 23
    w = np.arange(n) % 3
    est = rng.standard_normal(n)
    d = Dataset(rng.standard_normal(n), w, np.zeros((n, 1)), 2)
    rows = subgroup_eval(est, d, 1, n_groups=5)
    assert [r["n"] for r in rows] == [5, 5, 5, 4, 4]
    est_means = [r["estimated"] for r in rows]
    assert est_means == sorted(est_means)
    # a bin without control subjects reports NA
    d2 = Dataset(np.arange(6.0), [1, 1, 1, 0, 0, 0], np.zeros((6, 1)), 1)
    rows = subgroup_eval(np.arange(6.0), d2, 1, n_groups=2)
    assert rows[0]["actual"] is None and rows[1]["actual"] is None
    rows = subgroup_eval(np.array([0, 5, 1, 4, 2, 3.0]), d2, 1, n_groups=2)
    assert rows[0]["actual"] == pytest.approx((0 + 2) / 2 - 4.0)
    with pytest.raises(ConfigError):
        subgroup_eval(est, d, 1, n_groups=1)


def test_subgroup_homogeneous_effect():
    rng = np.random.default_rng(1)
    n, c = 50_000, 1.5
    w = rng.integers(0, 2, n)
    y = rng.standard_normal(n) + c * (w == 1)
    d = Dataset(y, w, np.zeros((n, 1)), 1)
    est = c + 1e-9 * rng.standard_normal(n)
    for r in subgroup_eval(est, d, 1):
        se = math.sqrt(1 / r["n_arm"] + 1 / r["n_control"])
        assert abs(r["actual"] - c) <= 3 * se
        assert r["estimated"] == pytest.approx(c)


def _tiny_method(name):
    return RunConfig.from_method(name, n_trees=15, cv_folds=3, n_lambda=8)


def test_benchmark_single_replication_and_determinism(tmp_path):
    spec = ScenarioSpec(n_train=150, n_test=60)
    a = run_benchmark([spec], [_tiny_method("gbm.gl")], replications=1, master_seed=4)
    b = run_benchmark([spec], [_tiny_method("gbm.gl")], replications=1, master_seed=4)
    assert all(r["sd"] == 0.0 for r in a.rows)
    assert a.rows == b.rows
    assert {r["metric"] for r in a.rows} == {"mpehe", "abs_rel_bias", "kappa", "spearman", "n_terms"}
    for res, name in ((a, "a"), (b, "b")):
        write_benchmark(res, tmp_path / f"{name}.csv", tmp_path / f"{name}.json", tmp_path / f"{name}-reps.csv")
    for suffix in (".csv", ".json", "-reps.csv"):
        assert (tmp_path / f"a{suffix}").read_bytes() == (tmp_path / f"b{suffix}").read_bytes()


def test_benchmark_two_reps_two_methods():
    spec = ScenarioSpec(n_train=150, n_test=60)
    res = run_benchmark([spec], [_tiny_method("gbm.gl"), _tiny_method("gbm.agl")], replications=2)
    s = res.summary(spec.name, "gbm.agl")
    assert s["mpehe"]["replications"] == 2 and s["mpehe"]["failures"] == 0
    vals = [r["mpehe"] for r in res.replicates if r["method"] == "gbm.agl"]
    assert s["mpehe"]["sd"] == pytest.approx(np.std(vals, ddof=1))
    assert len(res.replicates) == 4


def test_replication_seeds_depend_on_scenario_and_rep():
    s1, s2 = ScenarioSpec.from_code("L-L"), ScenarioSpec.from_code("L-S")
    assert replication_seeds(0, s1, 0) != replication_seeds(0, s1, 1)
    assert replication_seeds(0, s1, 0) != replication_seeds(0, s2, 0)
    assert replication_seeds(0, s1, 0) == replication_seeds(0, s1, 0)
    with pytest.raises(ConfigError):
        run_benchmark([s1], ["gbm.gl", "gbm.gl"], replications=1)
