"""Random-Forest feature importance for deriving shared ensemble weights.

Binary CART trees with Gini impurity, bootstrap row sampling and uniform
feature subsampling per split. Classes are weighted inversely to frequency so
the handful of detected-malicious windows is not swamped by benign ones.
Everything is deterministic for a fixed seed: equal-gain splits break ties by
lowest feature index, then lowest threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .detector import WeightVector
from .features import (
    FEATURE_NAMES,
    LABEL_BENIGN,
    LABEL_MALICIOUS,
    LABEL_UNLABELED,
    N_FEATURES,
    FeatureMatrix,
)


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: Optional[int] = None
    features_per_split: int = math.ceil(math.sqrt(N_FEATURES))  # 6
    bootstrap: bool = True
    rng_seed: int = 0
    importance: str = "gini"  # or "permutation"

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not 1 <= self.features_per_split <= N_FEATURES:
            raise ValueError(f"features_per_split must be in [1, {N_FEATURES}]")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be positive")
        if self.importance not in ("gini", "permutation"):
            raise ValueError("importance must be 'gini' or 'permutation'")


class _Tree:
    """Flat-array binary tree; leaves have feature == -1."""

    __slots__ = ("feature", "threshold", "left", "right", "leaf_class", "importances")

    def __init__(self, n_features: int):
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.leaf_class: list[int] = []
        self.importances = np.zeros(n_features)

    def add_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.leaf_class.append(0)
        return len(self.feature) - 1

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(len(X), dtype=np.int8)
        stack = [(0, np.arange(len(X)))]
        while stack:
            node, idx = stack.pop()
            f = self.feature[node]
            if f < 0:
                out[idx] = self.leaf_class[node]
                continue
            go_left = X[idx, f] <= self.threshold[node]
            stack.append((self.left[node], idx[go_left]))
            stack.append((self.right[node], idx[~go_left]))
        return out


@dataclass
class RandomForest:
    trees: list[_Tree]
    n_features: int
    config: ForestConfig
    oob_accuracy: Optional[float] = None

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        votes = np.zeros((len(X), 2), dtype=np.int64)
        for tree in self.trees:
            pred = tree.predict(X)
            votes[np.arange(len(X)), pred] += 1
        # ties resolve to the lower class label
        return (votes[:, 1] > votes[:, 0]).astype(np.int8)

    def accuracy(self, X: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))


def _gini(w0: float, w1: float) -> float:
    tot = w0 + w1
    if tot <= 0:
        return 0.0
    p0 = w0 / tot
    p1 = w1 / tot
    return 1.0 - p0 * p0 - p1 * p1


def _best_split(X, y, sw, idx, feat_ids):
    """Best (gain, feature, threshold) over candidate features at one node.

    Gain is the absolute weighted impurity decrease; ties prefer the lowest
    feature index, then the lowest threshold.
    """
    w_all = sw[idx]
    y_all = y[idx]
    w1_tot = float(np.sum(w_all * y_all))
    w_tot = float(np.sum(w_all))
    parent = _gini(w_tot - w1_tot, w1_tot)
    if parent <= 0.0:
        return 0.0, -1, 0.0
    best_gain, best_feat, best_thr = 0.0, -1, 0.0
    for f in feat_ids:
        xv = X[idx, f]
        order = np.argsort(xv, kind="stable")
        xs = xv[order]
        if xs[0] == xs[-1]:
            continue
        ws = w_all[order]
        w1s = ws * y_all[order]
        cw = np.cumsum(ws)
        cw1 = np.cumsum(w1s)
        cut = np.flatnonzero(xs[1:] != xs[:-1])
        wl, w1l = cw[cut], cw1[cut]
        wr, w1r = w_tot - wl, w1_tot - w1l
        p1l = np.divide(w1l, wl, out=np.zeros_like(w1l), where=wl > 0)
        p1r = np.divide(w1r, wr, out=np.zeros_like(w1r), where=wr > 0)
        gini_l = 1.0 - p1l * p1l - (1.0 - p1l) ** 2
        gini_r = 1.0 - p1r * p1r - (1.0 - p1r) ** 2
        gain = w_tot * parent - wl * gini_l - wr * gini_r
        k = int(np.argmax(gain))  # first max: lowest threshold on ties
        g = float(gain[k])
        if g > best_gain:
            best_gain, best_feat = g, int(f)
            best_thr = float((xs[cut[k]] + xs[cut[k] + 1]) / 2.0)
    return best_gain, best_feat, best_thr


def _grow_tree(X, y, sw, boot_idx, rng, cfg, n_features) -> _Tree:
    tree = _Tree(n_features)
    m = min(cfg.features_per_split, n_features)
    stack = [(tree.add_node(), boot_idx, 0)]
    while stack:
        node, idx, depth = stack.pop()
        w = sw[idx]
        w1 = float(np.sum(w * y[idx]))
        w0 = float(np.sum(w)) - w1
        tree.leaf_class[node] = int(w1 > w0)
        if (
            len(idx) < 2
            or w0 == 0.0
            or w1 == 0.0
            or (cfg.max_depth is not None and depth >= cfg.max_depth)
        ):
            continue
        feat_ids = np.sort(rng.choice(n_features, size=m, replace=False))
        gain, feat, thr = _best_split(X, y, sw, idx, feat_ids)
        if feat < 0 or gain <= 0.0:
            continue
        tree.importances[feat] += gain
        go_left = X[idx, feat] <= thr
        left, right = tree.add_node(), tree.add_node()
        tree.feature[node] = feat
        tree.threshold[node] = thr
        tree.left[node] = left
        tree.right[node] = right
        stack.append((left, idx[go_left], depth + 1))
        stack.append((right, idx[~go_left], depth + 1))
    return tree


def _extract_xy(data: Union[FeatureMatrix, tuple]) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, FeatureMatrix):
        if np.any(data.labels == LABEL_UNLABELED):
            raise ValueError("matrix has unlabeled rows; label it before training")
        return data.values, (data.labels == LABEL_MALICIOUS).astype(np.int8)
    X, y = data
    return np.asarray(X, dtype=float), np.asarray(y, dtype=np.int8)


def train_forest(data: Union[FeatureMatrix, tuple], config: ForestConfig = ForestConfig()) -> RandomForest:
    """Fit the forest on a labeled matrix or an (X, y) pair with y in {0, 1}."""
    X, y = _extract_xy(data)
    n, n_features = X.shape
    if n < 2:
        raise ValueError("need at least 2 rows to train")
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ValueError(
            "training labels contain a single class; relax the detection "
            "threshold so both malicious and legitimate windows are present"
        )
    # inverse-frequency class weights applied inside the Gini computation
    cw = n / (2.0 * counts.astype(float))
    sw = cw[np.searchsorted(classes, y)]

    seeds = np.random.SeedSequence(config.rng_seed).spawn(config.n_trees)
    trees = []
    votes = np.zeros((n, 2), dtype=np.int64)
    voted = np.zeros(n, dtype=bool)
    for t in range(config.n_trees):
        rng = np.random.default_rng(seeds[t])
        if config.bootstrap:
            boot = rng.integers(0, n, size=n)
        else:
            boot = np.arange(n)
        tree = _grow_tree(X, y, sw, boot, rng, config, n_features)
        trees.append(tree)
        if config.bootstrap:
            oob = np.ones(n, dtype=bool)
            oob[boot] = False
            if np.any(oob):
                pred = tree.predict(X[oob])
                votes[np.flatnonzero(oob), pred] += 1
                voted |= oob
    forest = RandomForest(trees, n_features, config)
    if config.bootstrap and np.any(voted):
        pred = (votes[voted, 1] > votes[voted, 0]).astype(np.int8)
        forest.oob_accuracy = float(np.mean(pred == y[voted]))
    return forest


def raw_importances(forest: RandomForest) -> np.ndarray:
    """Mean over trees of per-tree normalized impurity decreases."""
    total = np.zeros(forest.n_features)
    used = 0
    for tree in forest.trees:
        s = tree.importances.sum()
        if s > 0:
            total += tree.importances / s
            used += 1
    if used == 0:
        raise ValueError("degenerate forest: no split decreased impurity")
    return total / used


def permutation_importances(
    forest: RandomForest, X: np.ndarray, y: np.ndarray, rng_seed: int = 0
) -> np.ndarray:
    """Accuracy drop when each column is shuffled; negatives clip to 0."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int8)
    base = forest.accuracy(X, y)
    rng = np.random.default_rng(rng_seed)
    drops = np.zeros(forest.n_features)
    for f in range(forest.n_features):
        Xp = X.copy()
        Xp[:, f] = Xp[rng.permutation(len(X)), f]
        drops[f] = base - forest.accuracy(Xp, y)
    drops = np.maximum(drops, 0.0)
    if drops.sum() == 0:
        raise ValueError("degenerate forest: permuting no feature changes accuracy")
    return drops


def feature_weights(
    forest: RandomForest,
    data: Optional[Union[FeatureMatrix, tuple]] = None,
) -> WeightVector:
    """Normalized per-feature importance as canonical ensemble weights.

    Requires a forest trained on the 35 canonical features; permutation
    importance additionally needs the training data back.
    """
    if forest.n_features != N_FEATURES:
        raise ValueError(
            f"forest was trained on {forest.n_features} features; "
            f"weights require the canonical {N_FEATURES}"
        )
    if forest.config.importance == "permutation":
        if data is None:
            raise ValueError("permutation importance needs the training data")
        X, y = _extract_xy(data)
        imp = permutation_importances(forest, X, y, forest.config.rng_seed)
    else:
        imp = raw_importances(forest)
    return WeightVector(imp / imp.sum())
