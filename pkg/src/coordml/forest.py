"""Random-forest regression built from CART trees.

Every split considers all features. Candidate thresholds are midpoints between
consecutive distinct sorted values, and the split maximising the reduction in
squared error wins; ties go to the lowest feature index and then to the
smallest threshold, so fitting is deterministic given the bootstrap draws.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

FOREST_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 20
    max_depth: int = 20
    min_samples_split: int = 2
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")


@dataclass
class Tree:
    """Array-encoded binary regression tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_features: int

    @property
    def depth(self) -> int:
        depth = np.zeros(len(self.feature), dtype=int)
        for i in range(len(self.feature)):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Index of the leaf reached by every row."""
        node = np.zeros(X.shape[0], dtype=np.intp)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            active = f >= 0
            if not active.any():
                return node
            r, nd = rows[active], node[active]
            go_left = X[r, f[active]] <= self.threshold[nd]
            node[r] = np.where(go_left, self.left[nd], self.right[nd])

    def predict(self, X) -> np.ndarray:
        X = _check_X(X, self.n_features)
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: Mapping, n_features: int) -> "Tree":
        return cls(
            np.asarray(obj["feature"], dtype=np.intp),
            np.asarray(obj["threshold"], dtype=np.float64),
            np.asarray(obj["left"], dtype=np.intp),
            np.asarray(obj["right"], dtype=np.intp),
            np.asarray(obj["value"], dtype=np.float64),
            n_features,
        )


@dataclass
class Forest:
    trees: list[Tree]
    n_features: int
    config: ForestConfig = field(default_factory=ForestConfig)

    def predict(self, X) -> np.ndarray:
        X = _check_X(X, self.n_features)
        # first tree plus the mean offset of the others: exact when all trees agree
        first = self.trees[0].value[self.trees[0].apply(X)]
        if len(self.trees) == 1:
            return first
        acc = np.zeros(X.shape[0])
        for tree in self.trees[1:]:
            acc += tree.value[tree.apply(X)] - first
        return first + acc / len(self.trees)

    __call__ = predict

    def to_dict(self) -> dict:
        c = self.config
        return {
            "schema_version": FOREST_SCHEMA_VERSION,
            "kind": "forest",
            "n_features": self.n_features,
            "config": {
                "n_trees": c.n_trees,
                "max_depth": c.max_depth,
                "min_samples_split": c.min_samples_split,
                "bootstrap": c.bootstrap,
                "seed": c.seed,
            },
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "Forest":
        if obj.get("kind") != "forest" or obj.get("schema_version") != FOREST_SCHEMA_VERSION:
            raise ValueError("not a supported forest model file")
        nf = obj["n_features"]
        return cls([Tree.from_dict(t, nf) for t in obj["trees"]], nf, ForestConfig(**obj["config"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Forest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_X(X, d: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != d:
        raise ValueError(f"expected X with {d} columns, got shape {X.shape}")
    return X


def best_split(X: np.ndarray, y: np.ndarray):
    """Best variance-reducing split of one node.

    Returns ``(feature, threshold, gain)`` or ``None`` when every feature is
    constant on the node. ``gain`` is the drop in the sum of squared errors.
    """
    m, d = X.shape
    if m < 2:
        return None
    order = np.argsort(X, axis=0, kind="stable")
    Xs = np.take_along_axis(X, order, axis=0)
    ys = y[order]
    csum = np.cumsum(ys, axis=0)[:-1]  # left sums for cut after row k
    total = y.sum()
    n_left = np.arange(1, m, dtype=np.float64)[:, None]
    n_right = m - n_left
    score = csum * csum / n_left + (total - csum) ** 2 / n_right
    valid = Xs[:-1] < Xs[1:]
    if not valid.any():
        return None
    score = np.where(valid, score, -np.inf)
    # scores that tie mathematically can differ in the last bits (different
    # summation order per feature), so anything within a relative 1e-12 of the
    # maximum counts as tied; row-major over (feature, cut) the first such entry
    # is the lowest feature, then the smallest threshold
    top = score.max()
    tied = score.T >= top - 1e-12 * abs(top)
    flat = int(np.argmax(tied))
    f, k = divmod(flat, m - 1)
    lo, hi = Xs[k, f], Xs[k + 1, f]
    thr = 0.5 * (lo + hi)
    if thr >= hi:  # adjacent floats
        thr = lo
    gain = float(score[k, f] - total * total / m)
    return f, float(thr), gain


def fit_tree(X: np.ndarray, y: np.ndarray, max_depth: int, min_samples_split: int = 2) -> Tree:
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        yi = y[idx]
        value.append(float(yi[0] + (yi - yi[0]).mean()))  # exact on constant nodes
        return len(feature) - 1

    stack = [(new_node(np.arange(len(y))), np.arange(len(y)), 0)]
    while stack:
        nid, idx, depth = stack.pop()
        if depth >= max_depth or len(idx) < min_samples_split:
            continue
        yn = y[idx]
        if np.all(yn == yn[0]):
            continue
        split = best_split(X[idx], yn)
        if split is None:
            continue
        f, thr, _ = split
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[nid] = f
        threshold[nid] = thr
        left[nid] = new_node(li)
        right[nid] = new_node(ri)
        stack.append((right[nid], ri, depth + 1))
        stack.append((left[nid], li, depth + 1))
    return Tree(
        np.asarray(feature, dtype=np.intp),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.intp),
        np.asarray(right, dtype=np.intp),
        np.asarray(value, dtype=np.float64),
        X.shape[1],
    )


def fit_forest(X, y, cfg: ForestConfig = ForestConfig()) -> Forest:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError(f"X {X.shape} and y {y.shape} disagree")
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples")
    rng = np.random.default_rng(cfg.seed)
    trees = []
    for _ in range(cfg.n_trees):
        idx = rng.integers(0, n, n) if cfg.bootstrap else np.arange(n)
        trees.append(fit_tree(X[idx], y[idx], cfg.max_depth, cfg.min_samples_split))
    return Forest(trees, X.shape[1], cfg)


def predict_forest(forest: Forest, X) -> np.ndarray:
    return forest.predict(X)
