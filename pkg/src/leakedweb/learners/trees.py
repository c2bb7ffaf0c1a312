"""Array-backed CART trees: Gini classification and weighted least squares
regression, both with per-split random feature subsampling.

Split search sorts every candidate feature once per node and scores all cut
points at once with cumulative sums. Ties go to the lowest feature index,
then the lowest cut position.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LEAF = -1


@dataclass(frozen=True, eq=False)
class Tree:
    feature: np.ndarray  # int, LEAF for leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (n_nodes, n_outputs)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row of ``X``."""
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] != LEAF
        while active.any():
            idx = np.nonzero(active)[0]
            n = node[idx]
            go_left = X[idx, self.feature[n]] <= self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
            active[idx] = self.feature[node[idx]] != LEAF
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
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
    def from_dict(cls, d: dict) -> Tree:
        value = np.asarray(d["value"], dtype=float)
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=float),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=value.reshape(len(d["feature"]), -1),
        )


def n_split_features(spec, n_features: int) -> int:
    if spec is None or spec == "all":
        return n_features
    if spec == "sqrt":
        return max(1, int(np.sqrt(n_features)))
    if spec == "log2":
        return max(1, int(np.log2(n_features)))
    if isinstance(spec, float):
        return max(1, min(n_features, int(spec * n_features)))
    return max(1, min(n_features, int(spec)))


def gini(counts) -> float:
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    return float(1.0 - (p * p).sum())


class _Builder:
    def __init__(self, n_outputs: int):
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[np.ndarray] = []
        self.n_outputs = n_outputs

    def add(self, value) -> int:
        self.feature.append(LEAF)
        self.threshold.append(0.0)
        self.left.append(LEAF)
        self.right.append(LEAF)
        self.value.append(np.asarray(value, dtype=float).reshape(self.n_outputs))
        return len(self.feature) - 1

    def build(self) -> Tree:
        return Tree(
            feature=np.asarray(self.feature, dtype=np.int64),
            threshold=np.asarray(self.threshold, dtype=float),
            left=np.asarray(self.left, dtype=np.int64),
            right=np.asarray(self.right, dtype=np.int64),
            value=np.vstack(self.value),
        )


def _candidate_cuts(xs: np.ndarray, min_leaf: int) -> np.ndarray:
    """Mask over cut positions ``i`` (left = first i+1 sorted rows)."""
    n = xs.shape[0]
    valid = xs[1:] > xs[:-1]
    pos = np.arange(1, n)[:, None]
    valid &= (pos >= min_leaf) & (n - pos >= min_leaf)
    return valid


def _pick(score: np.ndarray, valid: np.ndarray):
    """Best (position, feature column) by score; ties to lowest column then position."""
    score = np.where(valid, score, -np.inf)
    # column-major flattening puts feature order first
    flat = score.T.ravel()
    k = int(np.argmax(flat))
    if not np.isfinite(flat[k]):
        return None
    n_pos = score.shape[0]
    return k % n_pos, k // n_pos, flat[k]


def _best_gini_split(X, y, n_classes, feats, min_leaf):
    xs_all = X[:, feats]
    order = np.argsort(xs_all, axis=0, kind="stable")
    xs = np.take_along_axis(xs_all, order, axis=0)
    onehot = np.eye(n_classes)[y]  # (n, C)
    cum = np.cumsum(onehot[order], axis=0)  # (n, m, C)
    total = cum[-1]
    left = cum[:-1]
    right = total[None] - left
    n = len(y)
    nl = np.arange(1, n, dtype=float)[:, None]
    nr = n - nl
    # maximising this is minimising the weighted Gini of the children
    score = (left * left).sum(-1) / nl + (right * right).sum(-1) / nr
    valid = _candidate_cuts(xs, min_leaf)
    best = _pick(score, valid)
    if best is None:
        return None
    pos, col, s = best
    thr = 0.5 * (xs[pos, col] + xs[pos + 1, col])
    if not thr < xs[pos + 1, col]:
        thr = xs[pos, col]
    parent = (total * total).sum() / n
    return int(feats[col]), float(thr), float(s - parent)


def grow_classification_tree(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    rng: np.random.Generator,
    max_depth: int | None = None,
    min_leaf: int = 1,
    max_features="sqrt",
) -> Tree:
    """Grow a Gini CART tree; leaf values are class-count distributions."""
    n_features = X.shape[1]
    m = n_split_features(max_features, n_features)
    builder = _Builder(n_classes)
    root = builder.add(np.bincount(y, minlength=n_classes))
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        counts = builder.value[node]
        if (counts > 0).sum() <= 1 or len(idx) < 2 * min_leaf:
            continue
        if max_depth is not None and depth >= max_depth:
            continue
        Xn, yn = X[idx], y[idx]
        feats = np.sort(rng.choice(n_features, m, replace=False))
        found = _best_gini_split(Xn, yn, n_classes, feats, min_leaf)
        if found is None and m < n_features:
            # nothing splittable among the draw: fall back to the rest
            rest = np.setdiff1d(np.arange(n_features), feats)
            found = _best_gini_split(Xn, yn, n_classes, rest, min_leaf)
        if found is None:
            continue
        f, thr, _ = found
        go_left = Xn[:, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        ln = builder.add(np.bincount(y[li], minlength=n_classes))
        rn = builder.add(np.bincount(y[ri], minlength=n_classes))
        builder.feature[node] = f
        builder.threshold[node] = thr
        builder.left[node] = ln
        builder.right[node] = rn
        stack.append((rn, ri, depth + 1))
        stack.append((ln, li, depth + 1))
    return builder.build()


def _best_wls_split(X, z, w, feats, min_leaf):
    xs_all = X[:, feats]
    order = np.argsort(xs_all, axis=0, kind="stable")
    xs = np.take_along_axis(xs_all, order, axis=0)
    wz = (w * z)[order]
    ww = w[order]
    cwz = np.cumsum(wz, axis=0)
    cw = np.cumsum(ww, axis=0)
    twz, tw = cwz[-1], cw[-1]
    lwz, lw = cwz[:-1], cw[:-1]
    rwz, rw = twz - lwz, tw - lw
    with np.errstate(divide="ignore", invalid="ignore"):
        score = lwz * lwz / lw + rwz * rwz / rw
    valid = _candidate_cuts(xs, min_leaf) & (lw > 0) & (rw > 0)
    best = _pick(score, valid)
    if best is None:
        return None
    pos, col, s = best
    parent = twz[col] * twz[col] / tw[col]
    if not s > parent * (1 + 1e-12):
        return None
    thr = 0.5 * (xs[pos, col] + xs[pos + 1, col])
    if not thr < xs[pos + 1, col]:
        thr = xs[pos, col]
    return int(feats[col]), float(thr), float(s - parent)


def grow_regression_tree(
    X: np.ndarray,
    z: np.ndarray,
    w: np.ndarray,
    rng: np.random.Generator,
    max_depth: int = 3,
    min_leaf: int = 1,
    max_features="sqrt",
) -> Tree:
    """Weighted least-squares tree; leaves hold the weighted mean of ``z``."""
    n_features = X.shape[1]
    m = n_split_features(max_features, n_features)

    def leaf_value(idx):
        sw = w[idx].sum()
        return (w[idx] * z[idx]).sum() / sw if sw > 0 else 0.0

    builder = _Builder(1)
    root = builder.add(leaf_value(np.arange(len(z))))
    stack = [(root, np.arange(len(z)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if depth >= max_depth or len(idx) < 2 * min_leaf:
            continue
        feats = np.sort(rng.choice(n_features, m, replace=False))
        found = _best_wls_split(X[idx], z[idx], w[idx], feats, min_leaf)
        if found is None:
            continue
        f, thr, _ = found
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        ln = builder.add(leaf_value(li))
        rn = builder.add(leaf_value(ri))
        builder.feature[node] = f
        builder.threshold[node] = thr
        builder.left[node] = ln
        builder.right[node] = rn
        stack.append((rn, ri, depth + 1))
        stack.append((ln, li, depth + 1))
    return builder.build()
