import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from coordml.forest import Forest, ForestConfig, Tree, best_split, fit_forest, fit_tree, predict_forest


def brute_force_split(X, y):
    """Exhaustive search: every feature, every midpoint, first best wins."""
    best = None
    sse_parent = float(((y - y.mean()) ** 2).sum())
    for f in range(X.shape[1]):
        vals = np.unique(X[:, f])
        for lo, hi in zip(vals[:-1], vals[1:]):
            thr = 0.5 * (lo + hi)
            left = X[:, f] <= thr
            sse = sum(float(((y[m] - y[m].mean()) ** 2).sum()) for m in (left, ~left))
            gain = sse_parent - sse
            if best is None or gain > best[2] + 1e-9:
                best = (f, thr, gain)
    return best


def test_defaults():
    cfg = ForestConfig()
    assert (cfg.n_trees, cfg.max_depth, cfg.min_samples_split, cfg.bootstrap) == (20, 20, 2, True)
    with pytest.raises(ValueError):
        ForestConfig(n_trees=0)
    with pytest.raises(ValueError):
        ForestConfig(max_depth=0)


def test_constant_target():
    X = np.random.default_rng(0).standard_normal((30, 3))
    forest = fit_forest(X, np.full(30, 4.2))
    np.testing.assert_array_equal(forest.predict(X), 4.2)


def test_indicator_stump():
    x0 = np.array([-3.0, -2.5, -2.0, -1.5, -1.0, 1.0, 1.5, 2.0, 2.5, 3.0])
    X = np.column_stack([x0, np.random.default_rng(1).standard_normal(10)])
    y = (x0 > 0).astype(float)
    forest = fit_forest(X, y, ForestConfig(n_trees=1, max_depth=1, bootstrap=False))
    tree = forest.trees[0]
    assert tree.feature[0] == 0
    assert tree.threshold[0] == 0.0
    leaves = sorted(tree.value[[tree.left[0], tree.right[0]]])
    assert leaves == [0.0, 1.0]


def test_split_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(2, 20))
        X = np.round(rng.standard_normal((n, 3)), 1)  # rounding creates ties
        y = np.round(rng.standard_normal(n), 1)
        got = best_split(X, y)
        want = brute_force_split(X, y)
        if want is None or want[2] <= 1e-12:
            continue
        assert got[0] == want[0]
        assert got[1] == pytest.approx(want[1])
        assert got[2] == pytest.approx(want[2])


def test_tie_break_lowest_feature_then_threshold():
    X = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    y = np.array([0.0, 0.0, 1.0, 1.0])
    f, thr, _ = best_split(X, y)
    assert (f, thr) == (0, 1.5)
    # symmetric target: cuts at 0.5 and 2.5 tie, the smaller threshold wins
    f, thr, _ = best_split(X[:, :1], np.array([1.0, 0.0, 0.0, 1.0]) * 0 + np.array([0.0, 1.0, 1.0, 0.0]))
    assert f == 0 and thr == 0.5


def test_constant_features_give_leaf():
    X = np.ones((5, 2))
    assert best_split(X, np.arange(5.0)) is None
    tree = fit_tree(X, np.arange(5.0), max_depth=5)
    assert len(tree.feature) == 1 and tree.value[0] == 2.0


def test_single_tree_forest_equals_tree():
    rng = np.random.default_rng(3)
    X, y = rng.standard_normal((40, 3)), rng.standard_normal(40)
    forest = fit_forest(X, y, ForestConfig(n_trees=1, bootstrap=False, max_depth=4))
    np.testing.assert_array_equal(forest.predict(X), forest.trees[0].predict(X))


def test_mean_aggregation():
    def const_tree(v):
        return Tree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]), np.array([v]), 2)

    forest = Forest([const_tree(0.0), const_tree(4.0)], 2)
    assert predict_forest(forest, np.zeros((1, 2)))[0] == 2.0


def test_smooth_target_training_r2():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((300, 4))
    y = np.sin(X[:, 0]) + X[:, 1] ** 2
    pred = fit_forest(X, y, ForestConfig(seed=1)).predict(X)
    r2 = 1 - np.sum((y - pred) ** 2) / np.sum((y - y.mean()) ** 2)
    assert r2 > 0


def test_depth_and_determinism():
    rng = np.random.default_rng(5)
    X, y = rng.standard_normal((200, 3)), rng.standard_normal(200)
    a = fit_forest(X, y, ForestConfig(n_trees=3, max_depth=4, seed=9))
    b = fit_forest(X, y, ForestConfig(n_trees=3, max_depth=4, seed=9))
    assert all(t.depth <= 4 for t in a.trees)
    np.testing.assert_array_equal(a.predict(X), b.predict(X))
    c = fit_forest(X, y, ForestConfig(n_trees=3, bootstrap=False, seed=9))
    for t in c.trees[1:]:
        np.testing.assert_array_equal(t.threshold, c.trees[0].threshold)


def test_leaf_values_are_means_of_routed_targets():
    rng = np.random.default_rng(6)
    X, y = rng.standard_normal((60, 2)), rng.standard_normal(60)
    tree = fit_tree(X, y, max_depth=3)
    leaves = tree.apply(X)
    for leaf in np.unique(leaves):
        assert tree.value[leaf] == pytest.approx(y[leaves == leaf].mean())


def test_dimension_mismatch():
    forest = fit_forest(np.ones((4, 2)) * np.arange(4)[:, None], np.arange(4.0), ForestConfig(n_trees=1))
    with pytest.raises(ValueError):
        forest.predict(np.ones((2, 3)))
    with pytest.raises(ValueError):
        fit_forest(np.ones((1, 2)), np.ones(1))


def test_serialisation_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    X, y = rng.standard_normal((50, 3)), rng.standard_normal(50)
    forest = fit_forest(X, y, ForestConfig(n_trees=2, seed=3))
    forest.save(tmp_path / "f.json")
    back = Forest.load(tmp_path / "f.json")
    np.testing.assert_array_equal(back.predict(X), forest.predict(X))
    assert back.config == forest.config


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(2, 25), st.integers(1, 3)), elements=st.floats(-5, 5)),
    st.integers(0, 2**31),
)
def test_predictions_within_target_range(X, seed):
    y = np.random.default_rng(seed).standard_normal(X.shape[0])
    forest = fit_forest(X, y, ForestConfig(n_trees=3, max_depth=5, seed=seed))
    Xq = np.random.default_rng(seed + 1).uniform(-6, 6, (10, X.shape[1]))
    p = forest.predict(Xq)
    assert np.all(p >= y.min() - 1e-12) and np.all(p <= y.max() + 1e-12)
