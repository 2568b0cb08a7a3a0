"""Regression trees and bagged forests for distilling a known-truth process.

Trees are grown greedily by exhaustive variance-reduction search over every
feature and every midpoint between consecutive distinct values.  Ties go to
the lowest feature index, then the lowest threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mathstat import RngStream, draw_seed, make_stream


@dataclass
class RegressionTree:
    """Array-encoded binary tree.  ``feature[k] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_features: int
    max_depth: int

    @property
    def n_nodes(self) -> int:
        return len(self.value)

    def depth(self) -> int:
        def walk(k):
            if self.feature[k] < 0:
                return 0
            return 1 + max(walk(self.left[k]), walk(self.right[k]))
        return walk(0)

    def apply(self, X) -> np.ndarray:
        """Index of the leaf each row of ``X`` lands in."""
        X = _as_matrix(X, self.n_features)
        node = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            feat = self.feature[node]
            inner = feat >= 0
            if not inner.any():
                return node
            rows = np.nonzero(inner)[0]
            go_left = X[rows, feat[rows]] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]


@dataclass
class RandomForest:
    trees: list

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def predict(self, X) -> np.ndarray:
        return predict_forest(self, X)


def _as_matrix(X, n_features=None) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"X must be 2-D, got shape {X.shape}")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"X has {X.shape[1]} features, model was trained on {n_features}")
    return X


def _best_split(X, y, features):
    """Return (gain, feature, threshold) of the best split, or None."""
    n = len(y)
    total = y.sum()
    base = total * total / n
    best = None
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        ys = y[order]
        csum = np.cumsum(ys)[:-1]
        n_left = np.arange(1, n)
        # between-group sum of squares; maximising it minimises child SSE
        score = csum ** 2 / n_left + (total - csum) ** 2 / (n - n_left)
        valid = xs[1:] > xs[:-1]
        if not valid.any():
            continue
        score = np.where(valid, score, -np.inf)
        i = int(np.argmax(score))
        gain = score[i] - base
        if best is None or gain > best[0]:
            best = (gain, f, 0.5 * (xs[i] + xs[i + 1]))
    return best


def fit_tree(X, y, max_depth: int, rng: RngStream | None = None, max_features: int | None = None) -> RegressionTree:
    """Grow one regression tree.

    ``rng`` is only consulted when ``max_features`` turns on per-split
    feature subsampling.
    """
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("cannot fit a tree on empty data")
    if y.shape != (X.shape[0],):
        raise ValueError(f"{len(y)} targets for {X.shape[0]} rows")
    if max_depth < 0:
        raise ValueError("max_depth must be >= 0")
    if max_features is not None and rng is None:
        raise ValueError("feature subsampling needs a random stream")
    d = X.shape[1]
    feature, threshold, left, right, value = [], [], [], [], []

    def grow(idx, depth):
        k = len(value)
        ys = y[idx]
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(np.mean(ys)))
        if depth >= max_depth or len(idx) < 2 or np.all(ys == ys[0]):
            return k
        if max_features is None or max_features >= d:
            feats = range(d)
        else:
            feats = np.sort(rng.choice(d, size=max_features, replace=False))
        split = _best_split(X[idx], ys, feats)
        if split is None or not split[0] > 0:
            return k
        _, f, thr = split
        mask = X[idx, f] <= thr
        feature[k] = int(f)
        threshold[k] = float(thr)
        left[k] = grow(idx[mask], depth + 1)
        right[k] = grow(idx[~mask], depth + 1)
        return k

    grow(np.arange(X.shape[0]), 0)
    return RegressionTree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=np.array(value),
        n_features=d,
        max_depth=max_depth,
    )


def fit_forest(X, y, n_trees: int, max_depth: int, rng: RngStream, max_features: int | None = None) -> RandomForest:
    """Bagged forest: each tree sees its own pairwise bootstrap resample."""
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("cannot fit a forest on empty data")
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    base = draw_seed(rng)
    trees = []
    n = X.shape[0]
    for i in range(n_trees):
        tree_rng = make_stream(base, i)
        idx = tree_rng.integers(0, n, size=n)
        trees.append(fit_tree(X[idx], y[idx], max_depth, tree_rng, max_features))
    return RandomForest(trees)


def predict_forest(model: RandomForest, X) -> np.ndarray:
    X = _as_matrix(X, model.trees[0].n_features)
    return np.mean([t.predict(X) for t in model.trees], axis=0)
