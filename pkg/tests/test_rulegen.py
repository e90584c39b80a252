import math

import numpy as np
import pytest

from rulehte.data import Condition, Dataset, RuleTerm, rule_matrix
from rulehte.errors import ConfigError
from rulehte.rulegen import (BoostConfig, TreeNode, boost, dedupe_rules, extract_rules, fit_tree,
                             sample_tree_size)


def test_tree_size_degenerate():
    rng = np.random.default_rng(0)
    assert {sample_tree_size(2.0, rng) for _ in range(100)} == {2}
    with pytest.raises(ConfigError):
        sample_tree_size(1.9, rng)


def test_tree_size_distribution():
    rng = np.random.default_rng(123)
    draws = np.array([sample_tree_size(3.0, rng) for _ in range(1_000_000)])
    assert abs(np.mean(draws == 2) - (1 - math.exp(-1))) <= 0.002
    # E[2 + floor(omega)] = 2 + sum_k exp(-k) = 2 + 1 / (e - 1)
    assert abs(draws.mean() - (2 + 1 / (math.e - 1))) <= 0.005


def test_constant_residuals_give_root():
    X = np.random.default_rng(0).standard_normal((50, 2))
    R = np.tile([1.5, -2.0], (50, 1))
    tree = fit_tree(X, R, np.arange(50), 4)
    assert tree.is_leaf
    np.testing.assert_array_equal(tree.value, [1.5, -2.0])


def test_binary_stump():
    X = np.repeat([[0.0], [1.0]], 20, axis=0)
    R = np.where(X == 0, -1.0, 3.0) + np.array([[0.0, 1.0]]) * 0
    tree = fit_tree(X, R, np.arange(40), 2)
    assert tree.split == (0, 0.5)
    np.testing.assert_allclose(tree.left.value, -1.0)
    np.testing.assert_allclose(tree.right.value, 3.0)


def test_four_leaves_hold_partition_means():
    rng = np.random.default_rng(1)
    n = 400
    X = rng.standard_normal((n, 3))
    R = np.column_stack([2 * (X[:, 0] > 0) + (X[:, 1] > 0.5), (X[:, 1] > 0.5) * -3.0]) + 0.1 * rng.standard_normal((n, 2))
    rows = np.arange(n)
    tree = fit_tree(X, R, rows, 4)
    assert tree.n_leaves == 4
    rules = extract_rules(tree)
    M = rule_matrix(rules, X)
    # every node: brute-force membership equals traversal; leaf value equals member mean
    nodes = [nd for nd in tree.nodes()][1:]
    for k, nd in enumerate(nodes):
        member = M[:, k] == 1
        assert member.sum() == nd.n_rows
        np.testing.assert_allclose(nd.value, R[member].mean(axis=0), rtol=1e-12)
        assert nd.n_rows >= 10
    assert len(rules) == tree.n_nodes - 1


def test_scalar_target_matches_variance_reduction():
    rng = np.random.default_rng(2)
    n = 120
    X = rng.standard_normal((n, 2))
    y = X[:, 1] ** 2 + 0.3 * rng.standard_normal(n)
    tree = fit_tree(X, y[:, None], np.arange(n), 2)
    # scalar reference: minimise within-child SSE over all admissible thresholds
    best = (np.inf, None)
    for j in range(2):
        xs = np.sort(X[:, j])
        for a, b in zip(xs[9:n - 10], xs[10:n - 9]):
            v = a + (b - a) / 2
            left = X[:, j] < v
            sse = ((y[left] - y[left].mean()) ** 2).sum() + ((y[~left] - y[~left].mean()) ** 2).sum()
            if sse < best[0]:
                best = (sse, (j, v))
    assert tree.split == best[1]


def test_ctree_refuses_noise_and_splits_signal():
    rng = np.random.default_rng(3)
    n = 300
    X = rng.standard_normal((n, 4))
    noise = rng.standard_normal((n, 2))
    assert fit_tree(X, noise, np.arange(n), 2, learner="ctree", alpha=1e-6).is_leaf
    signal = noise + 2.0 * (X[:, [2]] > 0)
    tree = fit_tree(X, signal, np.arange(n), 2, learner="ctree")
    assert tree.split[0] == 2


def _data(n=200, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 3))
    w = np.arange(n) % 3
    return Dataset(X[:, 0] + rng.standard_normal(n), w, X, 2)


def test_zero_shrinkage_keeps_residuals():
    d = _data()
    Z = np.column_stack([d.y, -d.y])
    res = boost(Z, d, BoostConfig(n_trees=5, mean_size=2, shrinkage=0.0, subsample=1.0))
    first = res.trees[0].to_dict()
    assert all(t.to_dict() == first for t in res.trees)
    assert len(set(res.train_loss)) == 1


def test_single_tree_is_fit_on_centred_target():
    d = _data()
    Z = np.column_stack([d.y, 2 * d.y + 1])
    res = boost(Z, d, BoostConfig(n_trees=1, mean_size=2, subsample=1.0))
    ref = fit_tree(d.X, Z - Z.mean(axis=0), np.arange(d.n), 2)
    assert res.trees[0].to_dict() == ref.to_dict()
    np.testing.assert_allclose(res.init, Z.mean(axis=0))


def test_training_loss_non_increasing():
    d = _data(seed=4)
    Z = np.column_stack([d.y * (d.X[:, 1] > 0), d.y])
    res = boost(Z, d, BoostConfig(n_trees=40, mean_size=3, shrinkage=0.5, subsample=1.0, seed=1))
    assert np.all(np.diff(res.train_loss) <= 1e-9)


def test_boost_reproducible():
    d = _data(seed=5)
    Z = np.column_stack([d.y, -d.y])
    cfg = BoostConfig(n_trees=20, mean_size=3, seed=9)
    a, b = boost(Z, d, cfg), boost(Z, d, cfg)
    assert [t.to_dict() for t in a.trees] == [t.to_dict() for t in b.trees]
    c = boost(Z, d, BoostConfig(n_trees=20, mean_size=3, seed=10))
    assert [t.to_dict() for t in a.trees] != [t.to_dict() for t in c.trees]


def test_extract_rules_shapes():
    root = TreeNode(np.zeros(1), 10)
    assert extract_rules(root) == []
    root.split = (2, 0.7)
    root.left, root.right = TreeNode(np.zeros(1), 5), TreeNode(np.zeros(1), 5)
    rules = extract_rules(root)
    assert [r.key for r in rules] == [((2, -math.inf, 0.7),), ((2, 0.7, math.inf),)]


def test_chain_merges_interval():
    leaf = lambda: TreeNode(np.zeros(1), 1)
    inner = TreeNode(np.zeros(1), 2, (0, -1.0), leaf(), leaf())
    root = TreeNode(np.zeros(1), 3, (0, 0.0), inner, leaf())
    keys = [r.key for r in extract_rules(root)]
    assert keys == [((0, -math.inf, 0.0),), ((0, -math.inf, -1.0),), ((0, -1.0, 0.0),), ((0, 0.0, math.inf),)]


def test_tree_json_round_trip():
    d = _data()
    tree = fit_tree(d.X, np.column_stack([d.y]), np.arange(d.n), 3)
    back = TreeNode.from_dict(tree.to_dict())
    np.testing.assert_array_equal(back.predict(d.X), tree.predict(d.X))


def test_dedupe():
    d = _data()
    a = RuleTerm((Condition(0, 0.0),))
    b = RuleTerm((Condition(1, -math.inf, 0.0),))
    everything = RuleTerm((Condition(0, -1e9),))
    assert dedupe_rules([a, b, RuleTerm((Condition(0, 0.0),)), everything], d) == [a, b]
    assert dedupe_rules([b, a], d) == [b, a]
    assert dedupe_rules([], d) == []


def test_config_validation():
    with pytest.raises(ConfigError):
        BoostConfig(n_trees=0)
    with pytest.raises(ConfigError):
        BoostConfig(learner="rf")
    with pytest.raises(ConfigError):
        fit_tree(np.zeros((4, 1)), np.zeros((4, 1)), np.arange(4), 1)
