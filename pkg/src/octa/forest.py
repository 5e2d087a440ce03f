"""Random-forest volume classification on per-cluster anomaly volumes.

Trees are CART classifiers with Gini impurity, ``ceil(sqrt(p))`` candidate
features per split, grown to purity on a bootstrap sample. Features are held
in float32 and thresholds are float32 values, so a saved forest reproduces
its predictions exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, ShapeError


@dataclass
class FeatureTable:
    rows: np.ndarray
    names: list
    labels: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.rows.ndim != 2 or self.rows.shape[1] != len(self.names):
            raise ShapeError("rows must be n x len(names)")
        if len(self.labels) != len(self.rows):
            raise ShapeError("one label per row required")
        if (self.rows < 0).any():
            raise ValueError("volume features must be nonnegative")


def cluster_volume_features(cluster_maps, n_clusters: int, spacing, binary: bool = False) -> np.ndarray:
    """Anomaly volume per cluster in cubic micrometers.

    ``cluster_maps`` holds one pixel map per B-scan with the cluster id of
    anomalous pixels and -1 elsewhere. With ``binary=True`` the single total
    anomaly volume is returned.
    """
    voxel = float(np.prod(spacing))
    counts = np.zeros(n_clusters, dtype=np.int64)
    for m in cluster_maps:
        m = np.asarray(m)
        counts += np.bincount(m[m >= 0].ravel(), minlength=n_clusters)[:n_clusters]
    vols = counts * voxel
    return np.array([vols.sum()]) if binary else vols


# --------------------------------------------------------------------------
# CART


@dataclass
class Tree:
    feature: np.ndarray     # -1 at leaves
    threshold: np.ndarray   # float32; x <= threshold goes left
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray       # class counts per node
    impurity: np.ndarray
    n_samples: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(len(x), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.nonzero(active)[0]
            nd = node[idx]
            go_left = x[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return node

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.value[self.apply(x)], axis=1)


def _gini(counts: np.ndarray) -> np.ndarray:
    n = counts.sum(axis=-1, keepdims=True)
    p = counts / np.where(n > 0, n, 1)
    return 1.0 - np.sum(p * p, axis=-1)


def _best_split(x, y, n_classes, feats):
    n = len(y)
    best = None
    for f in feats:
        order = np.argsort(x[:, f], kind="stable")
        xs, ys = x[order, f], y[order]
        valid = np.nonzero(xs[1:] > xs[:-1])[0]  # split after position i
        if len(valid) == 0:
            continue
        onehot = np.zeros((n, n_classes))
        onehot[np.arange(n), ys] = 1
        left = np.cumsum(onehot, axis=0)[valid]
        right = onehot.sum(axis=0) - left
        nl = valid + 1.0
        score = (nl * _gini(left) + (n - nl) * _gini(right)) / n
        k = int(np.argmin(score))
        if best is None or score[k] < best[0] - 1e-15:
            lo, hi = xs[valid[k]], xs[valid[k] + 1]
            thr = np.float32((float(lo) + float(hi)) / 2)
            if not thr < hi:
                thr = np.float32(lo)
            best = (score[k], f, thr)
    return best


def build_tree(x: np.ndarray, y: np.ndarray, n_classes: int, max_features: int,
               rng: np.random.Generator) -> Tree:
    p = x.shape[1]
    feature, threshold, left, right, value, impurity, nsamp = [], [], [], [], [], [], []

    def new_node(idx):
        counts = np.bincount(y[idx], minlength=n_classes).astype(np.float64)
        feature.append(-1)
        threshold.append(np.float32(0))
        left.append(-1)
        right.append(-1)
        value.append(counts)
        impurity.append(float(_gini(counts)))
        nsamp.append(len(idx))
        return len(feature) - 1

    root = new_node(np.arange(len(y)))
    stack = [(root, np.arange(len(y)))]
    while stack:
        node, idx = stack.pop()
        if impurity[node] <= 0 or len(idx) < 2:
            continue
        perm = rng.permutation(p)
        split = _best_split(x[idx], y[idx], n_classes, perm[:max_features])
        if split is None:  # sampled features constant here: fall back to the rest
            split = _best_split(x[idx], y[idx], n_classes, perm[max_features:])
        if split is None:
            continue
        _, f, thr = split
        go_left = x[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri))
        stack.append((left[node], li))
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=np.float32),
                np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                np.array(value), np.array(impurity), np.array(nsamp, dtype=np.int64))


# --------------------------------------------------------------------------
# forest


@dataclass
class ForestModel:
    kind = "forest"

    trees: list
    classes: list
    n_features: int
    feature_names: list
    oob: list = field(default_factory=list)   # boolean mask over training rows per tree
    seed: int = 0

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def _x(self, rows) -> np.ndarray:
        x = np.atleast_2d(np.asarray(rows, dtype=np.float32))
        if x.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} features, got {x.shape[1]}")
        return x

    def votes(self, rows) -> np.ndarray:
        x = self._x(rows)
        v = np.zeros((len(x), len(self.classes)))
        for t in self.trees:
            v[np.arange(len(x)), t.predict(x)] += 1
        return v / self.n_trees

    def predict(self, rows):
        """``(class labels, vote fractions)``; ties go to the first class."""
        frac = self.votes(rows)
        return np.asarray(self.classes)[np.argmax(frac, axis=1)], frac

    def to_arrays(self):
        arrays = {}
        for i, t in enumerate(self.trees):
            arrays[f"t{i}/feature"] = t.feature
            arrays[f"t{i}/threshold"] = t.threshold
            arrays[f"t{i}/left"] = t.left
            arrays[f"t{i}/right"] = t.right
            arrays[f"t{i}/value"] = t.value
            arrays[f"t{i}/impurity"] = t.impurity
            arrays[f"t{i}/n_samples"] = t.n_samples
            if self.oob:
                arrays[f"t{i}/oob"] = self.oob[i]
        meta = {"classes": list(map(str, self.classes)), "n_features": self.n_features,
                "feature_names": list(self.feature_names), "n_trees": self.n_trees, "seed": self.seed}
        return meta, arrays

    @classmethod
    def from_arrays(cls, meta, arrays):
        trees, oob = [], []
        for i in range(meta["n_trees"]):
            g = lambda k: arrays[f"t{i}/{k}"]  # noqa: E731
            trees.append(Tree(g("feature").astype(np.int64), g("threshold").astype(np.float32),
                              g("left").astype(np.int64), g("right").astype(np.int64),
                              g("value").astype(np.float64), g("impurity").astype(np.float64),
                              g("n_samples").astype(np.int64)))
            if f"t{i}/oob" in arrays:
                oob.append(arrays[f"t{i}/oob"].astype(bool))
        return cls(trees, meta["classes"], meta["n_features"], meta["feature_names"], oob, meta["seed"])


def fit_forest(table: FeatureTable, n_trees: int = 64, seed: int = 0, max_features=None) -> ForestModel:
    classes, y = np.unique(table.labels, return_inverse=True)
    if len(classes) < 2:
        raise DegenerateInputError("a forest needs at least two classes")
    if np.bincount(y).min() < 2:
        raise DegenerateInputError("every class needs at least two rows")
    x = table.rows.astype(np.float32)
    n, p = x.shape
    mf = max_features or math.ceil(math.sqrt(p))
    trees, oob = [], []
    for child in np.random.SeedSequence(seed).spawn(n_trees):
        rng = np.random.default_rng(child)
        boot = rng.integers(0, n, n)
        mask = np.ones(n, dtype=bool)
        mask[boot] = False
        trees.append(build_tree(x[boot], y[boot], len(classes), mf, rng))
        oob.append(mask)
    return ForestModel(trees, [c.item() if hasattr(c, "item") else c for c in classes], p,
                       list(table.names), oob, seed)


def predict(model: ForestModel, row):
    labels, frac = model.predict(row)
    return labels[0], frac[0]


def oob_accuracy(model: ForestModel, table: FeatureTable) -> float:
    """Accuracy of the aggregated out-of-bag vote (rows never out of bag are skipped)."""
    x = model._x(table.rows)
    y = np.searchsorted(np.asarray(model.classes), table.labels)
    votes = np.zeros((len(x), len(model.classes)))
    for t, m in zip(model.trees, model.oob):
        if m.any():
            votes[np.nonzero(m)[0], t.predict(x[m])] += 1
    seen = votes.sum(axis=1) > 0
    return float(np.mean(np.argmax(votes[seen], axis=1) == y[seen]))


@dataclass
class Importance:
    names: list
    classes: list
    overall: np.ndarray     # (p,) MDA over all classes
    per_class: np.ndarray   # (K, p) class-restricted MDA
    sign: np.ndarray        # (K, p) +1 when the feature is higher within the class
    gini: np.ndarray        # (p,)

    @property
    def signed(self) -> np.ndarray:
        return self.sign * np.abs(self.per_class)


def permutation_importance(model: ForestModel, table: FeatureTable, seed: int = 0) -> Importance:
    """Out-of-bag mean decrease of accuracy, overall and per class, with trend signs."""
    x = model._x(table.rows)
    y = np.searchsorted(np.asarray(model.classes), table.labels)
    K, p = len(model.classes), x.shape[1]
    rng = np.random.default_rng(seed)
    drop_all = [[] for _ in range(p)]
    drop_cls = [[[] for _ in range(p)] for _ in range(K)]
    for t, m in zip(model.trees, model.oob):
        idx = np.nonzero(m)[0]
        if len(idx) == 0:
            continue
        xo, yo = x[idx], y[idx]
        base = t.predict(xo) == yo
        for f in range(p):
            xp = xo.copy()
            xp[:, f] = xp[rng.permutation(len(idx)), f]
            hit = t.predict(xp) == yo
            drop_all[f].append(base.mean() - hit.mean())
            for k in range(K):
                sel = yo == k
                if sel.any():
                    drop_cls[k][f].append(base[sel].mean() - hit[sel].mean())
    overall = np.array([np.mean(d) if d else 0.0 for d in drop_all])
    per_class = np.array([[np.mean(d) if d else 0.0 for d in row] for row in drop_cls])
    sign = np.empty((K, p))
    for k in range(K):
        inside, outside = x[y == k], x[y != k]
        sign[k] = np.where(inside.mean(axis=0) > outside.mean(axis=0), 1.0, -1.0)
    return Importance(list(model.feature_names), list(model.classes), overall, per_class, sign,
                      gini_importance(model))


def gini_importance(model: ForestModel) -> np.ndarray:
    """Mean decrease in Gini impurity, weighted by node sample fraction, averaged over trees."""
    total = np.zeros(model.n_features)
    for t in model.trees:
        root = t.n_samples[0]
        split = np.nonzero(t.feature >= 0)[0]
        for nd in split:
            l, r = t.left[nd], t.right[nd]
            n, nl, nr = t.n_samples[nd], t.n_samples[l], t.n_samples[r]
            dec = t.impurity[nd] - (nl * t.impurity[l] + nr * t.impurity[r]) / n
            total[t.feature[nd]] += n / root * dec
    return total / max(model.n_trees, 1)
