"""
Bag features and decision-tree classification.

Latents of the 16 patches of a bag are pooled into one feature row: for ASR
the mean and population standard deviation of each ellipse variable per
scale (36 features), for the Baseline the mean of each latent dimension.
Rows are classified by CART trees selected with a cross-validated grid
search and pruned by minimal cost-complexity on the validation subset.

DocString style: https://www.sphinx-doc.org/en/master/usage/extensions/example_numpy.html
"""

import concurrent.futures
import copy
import csv
import dataclasses
import itertools
import json
import logging
import math
import os

import numpy as np
from sklearn.metrics import accuracy_score, confusion_matrix, precision_recall_fscore_support
from sklearn.model_selection import StratifiedKFold

from asr import autodiff as ad
from asr.errors import ConfigurationError, ContractError, DimensionError
from asr.model import ELLIPSE_VARIABLES, StructuredLatent

logger = logging.getLogger(__name__)

IMPURITIES = ("gini", "entropy")
TIE_TOLERANCE = 1e-12


# Features.


def asr_feature_names(scales=3):
    return [f"s{j}_{var}_{stat}" for j in range(scales) for var in ELLIPSE_VARIABLES for stat in ("mean", "std")]


def baseline_feature_names(latent_size=200):
    return [f"z{k:03d}_mean" for k in range(latent_size)]


@dataclasses.dataclass
class FeatureRow:
    bag_id: str
    label: str
    values: np.ndarray
    case_id: str = ""


def latent_features(latent):
    """Pool a StructuredLatent over its batch and grid cells: mean and std per (scale, variable)."""
    values = []
    for j in range(len(latent.scales)):
        cells = latent.cells(j).reshape(-1, len(ELLIPSE_VARIABLES)).astype(np.float64)
        for mean, std in zip(cells.mean(axis=0), cells.std(axis=0)):
            values.extend((mean, std))
    return np.asarray(values)


def extract_features(model, bag, batch_size=None):
    """Feature row of one bag.

    Parameters
    ----------
    model : AsrModel or BaselineModel
        A trained model; it is switched to evaluation mode.
    bag : Bag

    Returns
    -------
    FeatureRow
    """
    if getattr(model, "kind", None) not in ("asr", "baseline"):
        raise ContractError(f"cannot extract features with {type(model).__name__}")

    images = np.stack([patch.load() for patch in bag.patches])
    side = model.config.image_side
    if images.shape[1:] != (3, side, side):
        raise ContractError(f"bag {bag.bag_id}: patches of shape {images.shape[1:]} do not fit a {side}px model")

    model.eval()
    batch_size = batch_size or len(images)
    parts = []

    with ad.no_grad():
        for start in range(0, len(images), batch_size):
            x = ad.Tensor(images[start : start + batch_size])
            if model.kind == "asr":
                parts.append(model.latent(x))
            else:
                parts.append(np.asarray(model.encode(x).data, dtype=np.float64))

    if model.kind == "asr":
        latent = _concat_latents(parts)
        values = latent_features(latent)
    else:
        values = np.concatenate(parts).mean(axis=0)

    return FeatureRow(bag_id=bag.bag_id, label=bag.label, values=values, case_id=bag.case_id)


def _concat_latents(parts):
    if len(parts) == 1:
        return parts[0]
    scales = []
    for j in range(len(parts[0].scales)):
        scales.append(tuple(ad.Tensor(np.concatenate([p.scales[j][k].data for p in parts])) for k in range(4)))
    bg = ad.Tensor(np.concatenate([p.bg.data for p in parts]))
    return StructuredLatent(scales=scales, bg=bg)


def feature_names_for(model):
    if model.kind == "asr":
        return asr_feature_names(len(model.scales))
    return baseline_feature_names(model.latent_size)


def write_features(rows, names, path):
    with open(path, "w", newline="", encoding="utf-8") as csvfile:
        writer = csv.writer(csvfile, lineterminator="\n")
        writer.writerow(["bag_id", "case_id", "label"] + list(names))
        for row in rows:
            writer.writerow([row.bag_id, row.case_id, row.label] + [repr(float(v)) for v in row.values])
    return path


def read_features(path):
    """Feature rows and attribute names from a CSV written by ``write_features``."""
    with open(path, newline="", encoding="utf-8") as csvfile:
        reader = csv.reader(csvfile)
        header = next(reader, None)
        if header is None or header[:3] != ["bag_id", "case_id", "label"]:
            raise ConfigurationError(f"{path} is not a feature file")
        rows = [
            FeatureRow(bag_id=r[0], case_id=r[1], label=r[2], values=np.asarray(r[3:], dtype=float)) for r in reader
        ]
    return rows, header[3:]


def rows_to_arrays(rows):
    if not rows:
        raise ConfigurationError("no feature rows")
    X = np.stack([np.asarray(r.values, dtype=float) for r in rows])
    y = np.asarray([r.label for r in rows])
    return X, y


# Impurity.


def gini(counts):
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - np.sum(p * p))


def entropy(counts):
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log2(p)))


def _impurity_rows(counts, criterion):
    """Impurity of every row of a [K, classes] count matrix."""
    n = counts.sum(axis=1, keepdims=True)
    p = np.divide(counts, n, out=np.zeros_like(counts, dtype=float), where=n > 0)
    if criterion == "gini":
        return 1.0 - np.sum(p * p, axis=1)
    logp = np.log2(np.where(p > 0, p, 1.0))
    return -np.sum(p * logp, axis=1)


IMPURITY_FUNCTIONS = {"gini": gini, "entropy": entropy}


# Trees.


@dataclasses.dataclass
class TreeNode:
    """A split (``feature``/``threshold`` with both children) or a leaf (no children).

    Rows with ``x[feature] <= threshold`` go left.
    """

    node_id: int
    depth: int
    n_samples: int
    class_counts: np.ndarray
    impurity: float
    feature: int = None
    threshold: float = None
    left: "TreeNode" = None
    right: "TreeNode" = None

    @property
    def is_leaf(self):
        return self.left is None

    @property
    def prediction(self):
        return int(np.argmax(self.class_counts))

    def nodes(self):
        yield self
        if not self.is_leaf:
            yield from self.left.nodes()
            yield from self.right.nodes()

    def leaves(self):
        return [node for node in self.nodes() if node.is_leaf]


@dataclasses.dataclass
class DecisionTree:
    root: TreeNode
    classes: np.ndarray
    criterion: str = "gini"
    max_depth: int = None
    min_samples_leaf: int = 1
    feature_names: list = None

    @property
    def n_leaves(self):
        return len(self.root.leaves())

    @property
    def n_nodes(self):
        return sum(1 for _ in self.root.nodes())

    @property
    def depth(self):
        return max(node.depth for node in self.root.leaves())

    def node_ids(self):
        return {node.node_id for node in self.root.nodes()}

    def apply(self, X):
        """Leaf node reached by every row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        leaves = []
        for x in X:
            node = self.root
            while not node.is_leaf:
                node = node.left if x[node.feature] <= node.threshold else node.right
            leaves.append(node)
        return leaves

    def predict(self, X):
        return self.classes[[leaf.prediction for leaf in self.apply(X)]]

    def feature_importances(self, n_features=None):
        """Total weighted impurity decrease per attribute, normalized to sum 1."""
        if n_features is None:
            splits = [node.feature for node in self.root.nodes() if not node.is_leaf]
            n_features = len(self.feature_names) if self.feature_names else max(splits, default=0) + 1

        importances = np.zeros(n_features)
        total = self.root.n_samples

        for node in self.root.nodes():
            if node.is_leaf:
                continue
            decrease = node.n_samples * node.impurity
            decrease -= node.left.n_samples * node.left.impurity + node.right.n_samples * node.right.impurity
            importances[node.feature] += decrease / total

        norm = importances.sum()
        return importances / norm if norm > 0 else importances


def best_split(X, y_codes, n_classes, criterion="gini", min_samples_leaf=1):
    """Best (feature, threshold, decrease) over all attributes and midpoint thresholds.

    Ties within TIE_TOLERANCE of the best decrease go to the lowest attribute,
    then the lowest threshold.  Returns None if no split respects ``min_samples_leaf``.
    """
    n, n_features = X.shape
    onehot = np.eye(n_classes)[y_codes]
    totals = onehot.sum(axis=0, keepdims=True)
    parent = _impurity_rows(totals, criterion)[0]

    candidates = []
    for feature in range(n_features):
        order = np.argsort(X[:, feature], kind="stable")
        xs = X[order, feature]
        left_counts = np.cumsum(onehot[order], axis=0)[:-1]
        right_counts = totals - left_counts

        n_left = np.arange(1, n)
        valid = (xs[:-1] < xs[1:]) & (n_left >= min_samples_leaf) & (n - n_left >= min_samples_leaf)
        if not valid.any():
            continue

        positions = np.flatnonzero(valid)
        weighted = (
            n_left[positions] * _impurity_rows(left_counts[positions], criterion)
            + (n - n_left[positions]) * _impurity_rows(right_counts[positions], criterion)
        ) / n
        candidates.append((feature, positions, xs, parent - weighted))

    if not candidates:
        return None

    best = max(dec.max() for _, _, _, dec in candidates)
    for feature, positions, xs, dec in candidates:
        hits = np.flatnonzero(dec >= best - TIE_TOLERANCE)
        if hits.size:
            i = positions[hits[0]]
            threshold = xs[i] / 2.0 + xs[i + 1] / 2.0
            if threshold == xs[i + 1]:
                threshold = xs[i]
            return feature, float(threshold), float(dec[hits[0]])

    return None


def fit_tree(X, y, impurity="gini", max_depth=None, min_samples_leaf=1, feature_names=None, classes=None):
    """Grow a CART classification tree greedily.

    Parameters
    ----------
    X : numpy.ndarray
        [n, attributes] feature matrix.
    y : sequence
        Class labels.
    impurity : str
        "gini" or "entropy".
    max_depth : int
        None grows until the leaves are pure or cannot be split.
    min_samples_leaf : int
        Minimal number of training rows in every leaf.

    Returns
    -------
    DecisionTree
    """
    if impurity not in IMPURITIES:
        raise ConfigurationError(f"unknown impurity {impurity!r}")
    if min_samples_leaf < 1:
        raise ConfigurationError("min_samples_leaf must be at least 1")

    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DimensionError(f"fit_tree: {X.shape} feature matrix for {y.shape[0]} labels")
    if X.shape[0] == 0:
        raise ConfigurationError("fit_tree: no training rows")

    classes = np.unique(y) if classes is None else np.asarray(classes)
    codes = np.searchsorted(classes, y)
    n_classes = len(classes)
    counter = itertools.count()

    def grow(indices, depth):
        counts = np.bincount(codes[indices], minlength=n_classes).astype(float)
        node = TreeNode(
            node_id=next(counter),
            depth=depth,
            n_samples=len(indices),
            class_counts=counts,
            impurity=IMPURITY_FUNCTIONS[impurity](counts),
        )

        if node.impurity <= 0.0 or (max_depth is not None and depth >= max_depth):
            return node
        if len(indices) < 2 * min_samples_leaf:
            return node

        split = best_split(X[indices], codes[indices], n_classes, impurity, min_samples_leaf)
        if split is None:
            return node

        node.feature, node.threshold, _ = split
        goes_left = X[indices, node.feature] <= node.threshold
        node.left = grow(indices[goes_left], depth + 1)
        node.right = grow(indices[~goes_left], depth + 1)
        return node

    root = grow(np.arange(X.shape[0]), 0)

    return DecisionTree(
        root=root,
        classes=classes,
        criterion=impurity,
        max_depth=max_depth,
        min_samples_leaf=min_samples_leaf,
        feature_names=list(feature_names) if feature_names is not None else None,
    )


# Minimal cost-complexity pruning.


def _risk(node, total):
    return node.n_samples / total * node.impurity


def _subtree_stats(node, total):
    """(risk of the subtree's leaves, leaf count) for every internal node, keyed by node_id."""
    stats = {}

    def walk(n):
        if n.is_leaf:
            return _risk(n, total), 1
        left_risk, left_leaves = walk(n.left)
        right_risk, right_leaves = walk(n.right)
        stats[n.node_id] = (n, left_risk + right_risk, left_leaves + right_leaves)
        return left_risk + right_risk, left_leaves + right_leaves

    walk(node)
    return stats


def prune(tree, node_ids):
    """Copy of ``tree`` with the given internal nodes collapsed into leaves."""
    pruned = copy.deepcopy(tree)
    for node in pruned.root.nodes():
        if node.node_id in node_ids:
            node.left = node.right = None
            node.feature = node.threshold = None
    return pruned


def ccp_prune_path(tree):
    """Weakest-link pruning sequence from the full tree down to the root leaf.

    Each step collapses every internal node whose effective alpha
    (R(node) - R(subtree)) / (leaves - 1) is minimal, where R is the node
    impurity weighted by its fraction of the training rows.

    Returns
    -------
    list of tuple
        ``(alpha, DecisionTree)`` pairs with strictly increasing alpha; each
        tree is a pruned version of the one before it.
    """
    total = tree.root.n_samples
    path = [(0.0, tree)]
    current = tree

    while not current.root.is_leaf:
        stats = _subtree_stats(current.root, total)
        alphas = {
            node_id: max((_risk(node, total) - risk) / (leaves - 1), 0.0)
            for node_id, (node, risk, leaves) in stats.items()
        }
        alpha = min(alphas.values())
        weakest = {node_id for node_id, a in alphas.items() if a <= alpha + TIE_TOLERANCE}
        current = prune(current, weakest)

        if alpha <= path[-1][0] + TIE_TOLERANCE:
            path[-1] = (path[-1][0], current)
        else:
            path.append((alpha, current))

    return path


# Model selection.


@dataclasses.dataclass
class GridSpec:
    impurities: tuple = ("gini", "entropy")
    max_depths: tuple = (3, 4, 5, 7, None)
    min_samples_leaf: tuple = (5, 10, 20)

    def combinations(self):
        return [
            {"impurity": i, "max_depth": d, "min_samples_leaf": m}
            for i in self.impurities
            for d in self.max_depths
            for m in self.min_samples_leaf
        ]

    def __len__(self):
        return len(self.impurities) * len(self.max_depths) * len(self.min_samples_leaf)

    @classmethod
    def from_config(cls, config):
        return cls(tuple(config.impurities), tuple(config.max_depths), tuple(config.min_samples_leaf))


def _simplicity(params):
    depth = math.inf if params["max_depth"] is None else params["max_depth"]
    return depth, -params["min_samples_leaf"], IMPURITIES.index(params["impurity"])


def _cv_score(args):
    X, y, classes, params, splits = args
    scores = []
    for train_idx, test_idx in splits:
        tree = fit_tree(X[train_idx], y[train_idx], classes=classes, **params)
        scores.append(accuracy_score(y[test_idx], tree.predict(X[test_idx])))
    return float(np.mean(scores))


def cross_validate(X, y, grid, folds=5, seed=0, jobs=1):
    """Mean stratified k-fold accuracy of every grid combination, in grid order."""
    _, class_sizes = np.unique(y, return_counts=True)
    smallest = int(class_sizes.min())

    if smallest < 2:
        raise ConfigurationError("cross-validation needs at least two training rows per class")
    if smallest < folds:
        logger.warning(f"cross_validate: smallest class has {smallest} rows - using {smallest} of {folds} folds")
        folds = smallest

    classes = np.unique(y)
    splits = list(StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed).split(X, y))
    tasks = [(X, y, classes, params, splits) for params in grid.combinations()]

    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            scores = list(pool.map(_cv_score, tasks))
    else:
        scores = [_cv_score(task) for task in tasks]

    return [dict(params, cv_accuracy=score, folds=folds) for params, score in zip(grid.combinations(), scores)]


def select_params(cv_table):
    """Best CV accuracy; ties go to the shallower, larger-leaf, gini configuration."""
    best = max(row["cv_accuracy"] for row in cv_table)
    tied = [row for row in cv_table if row["cv_accuracy"] >= best - TIE_TOLERANCE]
    chosen = min(tied, key=_simplicity)
    return {key: chosen[key] for key in ("impurity", "max_depth", "min_samples_leaf")}


def classification_metrics(y_true, y_pred, labels=None):
    """Accuracy plus support-weighted precision, recall and F1."""
    precision, recall, f1, _ = precision_recall_fscore_support(
        y_true, y_pred, labels=labels, average="weighted", zero_division=0
    )
    labels = list(labels) if labels is not None else sorted(set(y_true) | set(y_pred))
    return {
        "accuracy": float(accuracy_score(y_true, y_pred)),
        "precision": float(precision),
        "recall": float(recall),
        "f1": float(f1),
        "labels": [str(label) for label in labels],
        "confusion_matrix": confusion_matrix(y_true, y_pred, labels=labels).tolist(),
    }


@dataclasses.dataclass
class SelectionResult:
    tree: DecisionTree
    params: dict
    alpha: float
    cv_table: list
    path_table: list
    metrics: dict
    importances: np.ndarray
    feature_names: list


def select_and_evaluate(train_rows, val_rows, test_rows, grid=None, feature_names=None, folds=5, seed=0, jobs=1):
    """Grid-search, prune and test a decision tree on feature rows.

    The combination with the best stratified CV accuracy on the training rows
    is refit on all of them; the pruning alpha maximizing validation accuracy
    (ties to the larger alpha) gives the final tree, which is scored on the
    test rows.

    Returns
    -------
    SelectionResult
    """
    grid = grid or GridSpec()
    subsets = {"train": train_rows, "val": val_rows, "test": test_rows}
    for name, rows in subsets.items():
        if not len(rows):
            raise ConfigurationError(f"select_and_evaluate: the {name} subset is empty")

    X_train, y_train = rows_to_arrays(train_rows)
    X_val, y_val = rows_to_arrays(val_rows)
    X_test, y_test = rows_to_arrays(test_rows)

    cv_table = cross_validate(X_train, y_train, grid, folds, seed, jobs)
    params = select_params(cv_table)
    logger.info(f"select_and_evaluate: best grid combination {params}")

    full = fit_tree(X_train, y_train, feature_names=feature_names, **params)
    path = ccp_prune_path(full)

    path_table = []
    best_alpha, best_tree, best_accuracy = None, None, -1.0
    for alpha, subtree in path:
        accuracy = float(accuracy_score(y_val, subtree.predict(X_val)))
        path_table.append({"alpha": alpha, "leaves": subtree.n_leaves, "val_accuracy": accuracy})
        # Later entries have larger alphas, so >= keeps the smaller tree on ties.
        if accuracy >= best_accuracy:
            best_alpha, best_tree, best_accuracy = alpha, subtree, accuracy

    labels = sorted(set(y_train) | set(y_val) | set(y_test))
    metrics = classification_metrics(y_test, best_tree.predict(X_test), labels)
    metrics.update(
        {"alpha": best_alpha, "leaves": best_tree.n_leaves, "nodes": best_tree.n_nodes, "depth": best_tree.depth}
    )

    n_features = X_train.shape[1]
    return SelectionResult(
        tree=best_tree,
        params=params,
        alpha=best_alpha,
        cv_table=cv_table,
        path_table=path_table,
        metrics=metrics,
        importances=best_tree.feature_importances(n_features),
        feature_names=list(feature_names) if feature_names is not None else [f"x{k}" for k in range(n_features)],
    )


# Exports.


def _feature_label(tree, feature):
    return tree.feature_names[feature] if tree.feature_names else f"x{feature}"


def export_text(tree, decimals=4):
    """Indented text rendering, one line per branch and leaf."""
    lines = []

    def walk(node, depth):
        indent = "|   " * depth + "|--- "
        if node.is_leaf:
            lines.append(f"{indent}class: {tree.classes[node.prediction]} (n={node.n_samples})")
            return
        name = _feature_label(tree, node.feature)
        lines.append(f"{indent}{name} <= {node.threshold:.{decimals}f}")
        walk(node.left, depth + 1)
        lines.append(f"{indent}{name} >  {node.threshold:.{decimals}f}")
        walk(node.right, depth + 1)

    walk(tree.root, 0)
    return "\n".join(lines) + "\n"


def export_dot(tree, decimals=4):
    """Graphviz DOT description of the tree."""
    out = ["digraph Tree {", 'node [shape=box, fontname="helvetica"] ;', 'edge [fontname="helvetica"] ;']

    for node in tree.root.nodes():
        counts = "[" + ", ".join(str(int(c)) for c in node.class_counts) + "]"
        text = f"{tree.criterion} = {node.impurity:.{decimals}f}\\nsamples = {node.n_samples}\\nvalue = {counts}"
        text += f"\\nclass = {tree.classes[node.prediction]}"
        if not node.is_leaf:
            text = f"{_feature_label(tree, node.feature)} <= {node.threshold:.{decimals}f}\\n" + text
        out.append(f'{node.node_id} [label="{text}"] ;')

    for node in tree.root.nodes():
        if not node.is_leaf:
            out.append(f"{node.node_id} -> {node.left.node_id} [label=\"True\"] ;")
            out.append(f"{node.node_id} -> {node.right.node_id} [label=\"False\"] ;")

    out.append("}")
    return "\n".join(out) + "\n"


def tree_to_dict(tree):
    def convert(node):
        entry = {
            "node_id": node.node_id,
            "n_samples": node.n_samples,
            "impurity": node.impurity,
            "class_counts": [int(c) for c in node.class_counts],
            "class": str(tree.classes[node.prediction]),
        }
        if not node.is_leaf:
            entry.update(
                {
                    "feature": _feature_label(tree, node.feature),
                    "threshold": node.threshold,
                    "left": convert(node.left),
                    "right": convert(node.right),
                }
            )
        return entry

    return {"criterion": tree.criterion, "classes": [str(c) for c in tree.classes], "root": convert(tree.root)}


def write_selection(result, directory):
    """Write tree.txt, tree.dot, tree.json, metrics.json, cv_table.csv and pruning_path.csv."""
    os.makedirs(directory, exist_ok=True)

    with open(os.path.join(directory, "tree.txt"), "w", encoding="utf-8") as out:
        out.write(export_text(result.tree))
    with open(os.path.join(directory, "tree.dot"), "w", encoding="utf-8") as out:
        out.write(export_dot(result.tree))
    with open(os.path.join(directory, "tree.json"), "w", encoding="utf-8") as out:
        json.dump(tree_to_dict(result.tree), out, indent=2)

    report = {
        "params": result.params,
        "metrics": result.metrics,
        "importances": dict(zip(result.feature_names, (float(v) for v in result.importances))),
    }
    with open(os.path.join(directory, "metrics.json"), "w", encoding="utf-8") as out:
        json.dump(report, out, indent=2)

    _write_table(result.cv_table, os.path.join(directory, "cv_table.csv"))
    _write_table(result.path_table, os.path.join(directory, "pruning_path.csv"))

    return directory


def _write_table(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as csvfile:
        writer = csv.DictWriter(csvfile, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "none" if v is None else v for k, v in row.items()})
