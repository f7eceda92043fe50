import json
import os

import numpy as np
import pytest

from asr import classify
from asr import model as m
from asr.classify import FeatureRow, GridSpec
from asr.datasets import Bag, Patch
from asr.errors import ConfigurationError
from asr.renderer import scale_configs


def test_separable_split():
    X = np.arange(1, 11, dtype=float)[:, None]
    y = (X[:, 0] > 5).astype(int)
    tree = classify.fit_tree(X, y)

    assert tree.root.feature == 0
    assert tree.root.threshold == 5.5
    assert tree.root.left.impurity == 0.0 and tree.root.right.impurity == 0.0
    assert tree.n_leaves == 2
    np.testing.assert_array_equal(tree.predict(X), y)


def test_impurities():
    assert classify.gini(np.array([5.0, 5.0])) == 0.5
    assert classify.gini(np.array([4.0, 0.0])) == 0.0
    assert classify.entropy(np.array([5.0, 5.0])) == pytest.approx(1.0)
    assert classify.gini(np.zeros(2)) == 0.0


def _brute_force(X, y, criterion="gini", min_samples_leaf=1):
    classes = np.unique(y)
    impurity = classify.IMPURITY_FUNCTIONS[criterion]

    def node_impurity(labels):
        return impurity(np.array([np.sum(labels == c) for c in classes], dtype=float))

    n = len(y)
    parent = node_impurity(y)
    best = -np.inf
    for feature in range(X.shape[1]):
        values = np.unique(X[:, feature])
        for low, high in zip(values[:-1], values[1:]):
            left = X[:, feature] <= (low + high) / 2
            if min(left.sum(), (~left).sum()) < min_samples_leaf:
                continue
            weighted = (left.sum() * node_impurity(y[left]) + (~left).sum() * node_impurity(y[~left])) / n
            best = max(best, parent - weighted)
    return best


@pytest.mark.parametrize("seed", range(10))
def test_root_split_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    X = np.round(rng.uniform(0, 10, (50, 4)), 1)
    y = rng.integers(0, 3, 50)
    codes = np.searchsorted(np.unique(y), y)

    feature, threshold, decrease = classify.best_split(X, codes, 3, "gini", min_samples_leaf=3)
    assert decrease == pytest.approx(_brute_force(X, y, "gini", 3), abs=1e-12)

    left = X[:, feature] <= threshold
    counts = [np.bincount(codes[mask], minlength=3).astype(float) for mask in (left, ~left)]
    parent = classify.gini(np.bincount(codes, minlength=3).astype(float))
    realized = parent - (left.sum() * classify.gini(counts[0]) + (~left).sum() * classify.gini(counts[1])) / 50
    assert realized == pytest.approx(decrease, abs=1e-12)


def test_every_split_of_a_grown_tree_matches_brute_force(rng):
    X = np.round(rng.uniform(0, 5, (80, 3)), 1)
    y = rng.integers(0, 2, 80)
    tree = classify.fit_tree(X, y, "entropy", max_depth=3, min_samples_leaf=2)

    def rows(node, mask):
        yield node, mask
        if not node.is_leaf:
            left = mask & (X[:, node.feature] <= node.threshold)
            yield from rows(node.left, left)
            yield from rows(node.right, mask & ~left)

    for node, mask in rows(tree.root, np.ones(80, dtype=bool)):
        if node.is_leaf:
            continue
        codes = np.searchsorted(tree.classes, y[mask])
        _, _, decrease = classify.best_split(X[mask], codes, 2, "entropy", 2)
        assert decrease == pytest.approx(_brute_force(X[mask], y[mask], "entropy", 2), abs=1e-12)


def test_ties_go_to_lowest_attribute():
    X = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [4.0, 4.0]])
    feature, threshold, _ = classify.best_split(X, np.array([0, 0, 1, 1]), 2)
    assert (feature, threshold) == (0, 2.5)


def test_depth_and_leaf_limits(rng):
    X = rng.uniform(0, 1, (100, 3))
    y = rng.integers(0, 2, 100)

    assert classify.fit_tree(X, y, max_depth=2).depth <= 2
    assert min(leaf.n_samples for leaf in classify.fit_tree(X, y, min_samples_leaf=10).root.leaves()) >= 10

    with pytest.raises(ConfigurationError):
        classify.fit_tree(X, y, impurity="mse")


def test_pruning_path_nests(rng):
    X = rng.uniform(0, 1, (120, 4))
    y = rng.integers(0, 3, 120)
    path = classify.ccp_prune_path(classify.fit_tree(X, y))

    alphas = [alpha for alpha, _ in path]
    assert alphas[0] == 0.0
    assert all(b > a for a, b in zip(alphas, alphas[1:]))
    for (_, bigger), (_, smaller) in zip(path, path[1:]):
        assert smaller.node_ids() < bigger.node_ids()
    assert path[-1][1].root.is_leaf


def test_pruning_hand_example():
    # Root splits off a pure leaf; the right child splits into pure leaves.
    X = np.array([[0.0], [0.0], [1.0], [2.0], [3.0]])
    y = np.array([0, 0, 1, 1, 0])
    tree = classify.fit_tree(X, y)
    assert tree.n_leaves == 3

    # Root: 0.48 / 2 = 0.24 beats the right child: (3 / 5) * (4 / 9) = 0.267.
    path = classify.ccp_prune_path(tree)
    assert [alpha for alpha, _ in path] == pytest.approx([0.0, 0.24])
    assert [t.n_leaves for _, t in path] == [3, 1]
    assert tree.n_leaves == 3


def test_feature_importances_sum_to_one(rng):
    X = rng.uniform(0, 1, (60, 5))
    y = (X[:, 1] + 0.2 * X[:, 3] > 0.6).astype(int)
    importances = classify.fit_tree(X, y, max_depth=4).feature_importances(5)
    assert importances.sum() == pytest.approx(1.0)
    assert importances.argmax() == 1


def test_weighted_metrics():
    y_true = ["a", "a", "a", "b", "b", "c"]
    y_pred = ["a", "a", "b", "b", "c", "c"]
    metrics = classify.classification_metrics(y_true, y_pred)

    assert metrics["accuracy"] == pytest.approx(4 / 6, abs=1e-9)
    assert metrics["precision"] == pytest.approx(0.75, abs=1e-9)
    assert metrics["recall"] == pytest.approx(4 / 6, abs=1e-9)
    assert metrics["f1"] == pytest.approx((3 * 0.8 + 2 * 0.5 + 1 * 2 / 3) / 6, abs=1e-9)
    assert metrics["confusion_matrix"] == [[2, 1, 0], [0, 1, 1], [0, 0, 1]]


def test_default_grid():
    grid = GridSpec()
    assert len(grid) == 30
    assert len(grid.combinations()) == 30
    assert grid.combinations()[0] == {"impurity": "gini", "max_depth": 3, "min_samples_leaf": 5}


def test_select_params_prefers_simpler_trees():
    table = [
        {"impurity": "entropy", "max_depth": 3, "min_samples_leaf": 20, "cv_accuracy": 0.9},
        {"impurity": "gini", "max_depth": None, "min_samples_leaf": 20, "cv_accuracy": 0.9},
        {"impurity": "gini", "max_depth": 3, "min_samples_leaf": 5, "cv_accuracy": 0.9},
        {"impurity": "gini", "max_depth": 3, "min_samples_leaf": 20, "cv_accuracy": 0.9},
        {"impurity": "gini", "max_depth": 2, "min_samples_leaf": 5, "cv_accuracy": 0.8},
    ]
    assert classify.select_params(table) == {"impurity": "gini", "max_depth": 3, "min_samples_leaf": 20}


def _rows(rng, count, prefix):
    rows = []
    for k in range(count):
        label = "hl" if k % 2 else "lym"
        values = rng.uniform(0, 1, 4)
        values[2] = values[2] + (2.0 if label == "hl" else 0.0)
        rows.append(FeatureRow(bag_id=f"{prefix}{k}", label=label, values=values, case_id=f"{prefix}{k // 4}"))
    return rows


def test_select_and_evaluate(rng, tmp_path):
    names = ["f0", "f1", "f2", "f3"]
    result = classify.select_and_evaluate(
        _rows(rng, 40, "tr"), _rows(rng, 10, "va"), _rows(rng, 10, "te"), GridSpec(), feature_names=names, seed=1
    )

    assert len(result.cv_table) == 30
    assert result.metrics["accuracy"] == 1.0
    assert result.importances.argmax() == 2
    assert result.path_table[0]["alpha"] == 0.0
    assert result.alpha == max(row["alpha"] for row in result.path_table if row["val_accuracy"] == 1.0)
    assert "f2 <=" in classify.export_text(result.tree)

    classify.write_selection(result, str(tmp_path))
    for name in ("tree.txt", "tree.dot", "tree.json", "metrics.json", "cv_table.csv", "pruning_path.csv"):
        assert os.path.isfile(tmp_path / name)
    with open(tmp_path / "metrics.json") as src:
        report = json.load(src)
    assert set(report["importances"]) == set(names)


def test_select_and_evaluate_needs_rows(rng):
    with pytest.raises(ConfigurationError, match="val"):
        classify.select_and_evaluate(_rows(rng, 20, "tr"), [], _rows(rng, 4, "te"))


def test_feature_file_round_trip(rng, tmp_path):
    rows = _rows(rng, 6, "b")
    path = classify.write_features(rows, ["a", "b", "c", "d"], str(tmp_path / "features_train.csv"))
    loaded, names = classify.read_features(path)

    assert names == ["a", "b", "c", "d"]
    assert [r.bag_id for r in loaded] == [r.bag_id for r in rows]
    np.testing.assert_array_equal(loaded[3].values, rows[3].values)


def test_latent_feature_statistics():
    scales = scale_configs()
    vector = np.full((2, 504), 0.5)
    vector[0, 0:384:6] = 0.1
    vector[1, 0:384:6] = 2.0
    latent = m.StructuredLatent.from_vector(vector, scales)
    features = dict(zip(classify.asr_feature_names(), classify.latent_features(latent)))

    assert len(features) == 36
    assert features["s0_w_mean"] == pytest.approx(1.05)
    assert features["s0_w_std"] == pytest.approx(0.95)
    assert features["s1_w_std"] == 0.0


def test_extract_features(tiny_model_config, tiny_images):
    bag = Bag(
        bag_id="c1-000",
        case_id="c1",
        label="hl",
        patches=tuple(Patch(case_id="c1", origin=(k, 0), pixels=tiny_images[k]) for k in range(4)),
    )

    asr_model = m.build_model("asr", tiny_model_config)
    row = classify.extract_features(asr_model, bag, batch_size=3)
    assert row.values.shape == (36,)
    assert row.label == "hl"
    np.testing.assert_allclose(row.values, classify.extract_features(asr_model, bag).values, rtol=1e-5, atol=1e-6)

    baseline = m.build_model("baseline", tiny_model_config)
    assert classify.extract_features(baseline, bag).values.shape == (12,)
    assert classify.feature_names_for(baseline)[0] == "z000_mean"


@pytest.mark.parametrize("impurity", ["gini", "entropy"])
def test_unpruned_tree_fits_training_rows(impurity):
    rng = np.random.default_rng(5)
    X = rng.uniform(0, 1, (60, 3))
    y = rng.integers(0, 3, 60)
    tree = classify.fit_tree(X, y, impurity=impurity)

    np.testing.assert_array_equal(tree.predict(X), y)
    assert all(leaf.impurity == 0.0 for leaf in tree.root.leaves())


def _structure(tree, X):
    nodes = [(n.feature, n.n_samples, tuple(n.class_counts)) for n in tree.root.nodes()]
    return nodes, [leaf.node_id for leaf in tree.apply(X)]


@pytest.mark.parametrize("impurity", ["gini", "entropy"])
def test_monotone_feature_transform_keeps_splits(impurity):
    rng = np.random.default_rng(8)
    X = np.round(rng.uniform(0, 5, (80, 3)), 2)
    y = (X[:, 0] + rng.normal(0, 1, 80) > X[:, 2]).astype(int) + (X[:, 1] > 4).astype(int)

    transformed = X.copy()
    transformed[:, 0] = np.exp(X[:, 0])
    transformed[:, 2] = X[:, 2] ** 3 + 2 * X[:, 2]

    tree = classify.fit_tree(X, y, impurity=impurity, min_samples_leaf=3)
    other = classify.fit_tree(transformed, y, impurity=impurity, min_samples_leaf=3)

    assert _structure(other, transformed) == _structure(tree, X)
