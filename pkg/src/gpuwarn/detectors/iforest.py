"""Isolation forest on dense float matrices, array-encoded trees."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EULER_GAMMA = 0.5772156649015329


_HARMONIC = np.concatenate([[0.0], np.cumsum(1.0 / np.arange(1, 64))])


def harmonic(k) -> np.ndarray:
    """H(k); exact below 64, asymptotic expansion above (error < 1e-12)."""
    k = np.asarray(k, dtype=float)
    small = k < 64
    out = np.empty_like(k)
    out[small] = _HARMONIC[k[small].astype(np.int64)]
    kb = k[~small]
    out[~small] = np.log(kb) + EULER_GAMMA + 1 / (2 * kb) - 1 / (12 * kb**2) + 1 / (120 * kb**4)
    return out


def average_path_length(n) -> np.ndarray:
    """c(n) = 2 H(n-1) - 2 (n-1) / n: mean unsuccessful-search path length of a BST on n points."""
    n = np.asarray(n, dtype=float)
    out = np.zeros_like(n)
    big = n > 2
    out[n == 2] = 1.0
    out[big] = 2.0 * harmonic(n[big] - 1.0) - 2.0 * (n[big] - 1.0) / n[big]
    return out


@dataclass(frozen=True)
class IsolationTree:
    feature: np.ndarray  # -1 at leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray  # training points reaching each node
    depth: np.ndarray

    @property
    def height(self) -> int:
        return int(self.depth.max())


@dataclass(frozen=True)
class IsolationForestModel:
    trees: tuple[IsolationTree, ...]
    subsample: int
    seed: int
    n_features: int

    @property
    def height_limit(self) -> int:
        return max(1, math.ceil(math.log2(max(self.subsample, 2))))

    def params(self) -> dict:
        return {"nTrees": len(self.trees), "subsample": self.subsample, "seed": self.seed,
                "heightLimit": self.height_limit}


def _grow(x: np.ndarray, limit: int, rng: np.random.Generator) -> IsolationTree:
    feature, threshold, left, right, size, depth = [], [], [], [], [], []

    def new_node(n: int, d: int) -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(n)
        depth.append(d)
        return len(feature) - 1

    root = new_node(len(x), 0)
    stack = [(root, np.arange(len(x)))]
    while stack:
        node, rows = stack.pop()
        d = depth[node]
        if d >= limit or len(rows) <= 1:
            continue
        sub = x[rows]
        lo, hi = sub.min(axis=0), sub.max(axis=0)
        splittable = np.flatnonzero(hi > lo)
        if splittable.size == 0:
            continue
        # Uniform over all features; a constant pick cannot split, so resample among the rest.
        q = int(rng.integers(x.shape[1]))
        if hi[q] <= lo[q]:
            q = int(splittable[rng.integers(splittable.size)])
        p = float(rng.uniform(lo[q], hi[q]))
        go_left = sub[:, q] < p
        lrows, rrows = rows[go_left], rows[~go_left]
        if lrows.size == 0 or rrows.size == 0:
            continue
        feature[node] = q
        threshold[node] = p
        lnode = new_node(lrows.size, d + 1)
        rnode = new_node(rrows.size, d + 1)
        left[node], right[node] = lnode, rnode
        stack.append((rnode, rrows))
        stack.append((lnode, lrows))
    return IsolationTree(
        np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64), np.array(size, dtype=np.int64), np.array(depth, dtype=np.int64),
    )


def train_isolation_forest(
    x: np.ndarray, n_trees: int = 100, subsample: int = 256, seed: int = 0
) -> IsolationForestModel:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least 2 training rows")
    if np.isnan(x).any():
        raise ValueError("impute missing values before training")
    rng = np.random.default_rng(seed)
    psi = min(subsample, x.shape[0])
    limit = max(1, math.ceil(math.log2(psi)))
    trees = []
    for _ in range(n_trees):
        rows = rng.choice(x.shape[0], size=psi, replace=False)
        trees.append(_grow(x[rows], limit, rng))
    return IsolationForestModel(tuple(trees), psi, seed, x.shape[1])


def path_lengths(tree: IsolationTree, x: np.ndarray) -> np.ndarray:
    node = np.zeros(len(x), dtype=np.int64)
    active = tree.feature[node] >= 0
    while active.any():
        idx = np.flatnonzero(active)
        cur = node[idx]
        go_left = x[idx, tree.feature[cur]] < tree.threshold[cur]
        node[idx] = np.where(go_left, tree.left[cur], tree.right[cur])
        active[idx] = tree.feature[node[idx]] >= 0
    return tree.depth[node] + average_path_length(tree.size[node])


def score_isolation_forest(model: IsolationForestModel, x: np.ndarray) -> np.ndarray:
    """2 ** (-E[h(x)] / c(psi)); values near 1 are anomalous."""
    x = np.asarray(x, dtype=float)
    total = np.zeros(len(x))
    for tree in model.trees:
        total += path_lengths(tree, x)
    mean_path = total / len(model.trees)
    c = float(average_path_length(model.subsample))
    if c == 0:
        return np.full(len(x), 0.5)
    return np.power(2.0, -mean_path / c)
