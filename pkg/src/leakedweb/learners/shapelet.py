"""Shapelet decision tree.

Each internal node holds one z-normalised subsequence (taken from a training
trace channel) and a distance threshold; a trace goes left when its best
sliding-window match is within the threshold. Candidates are scored by the
information gain of the best threshold on their distance column.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit


@njit(cache=True)
def _min_dists(shape, series):
    """Mean squared distance between z-normalised ``shape`` and the best
    z-normalised window of every row of ``series``."""
    l = shape.shape[0]
    n, L = series.shape
    out = np.empty(n)
    for r in range(n):
        best = np.inf
        x = series[r]
        s1 = 0.0
        s2 = 0.0
        for t in range(l):
            s1 += x[t]
            s2 += x[t] * x[t]
        for start in range(L - l + 1):
            if start > 0:
                old = x[start - 1]
                new = x[start + l - 1]
                s1 += new - old
                s2 += new * new - old * old
            mu = s1 / l
            var = s2 / l - mu * mu
            d = 0.0
            if var > 1e-12:
                sd = np.sqrt(var)
                for t in range(l):
                    diff = shape[t] - (x[start + t] - mu) / sd
                    d += diff * diff
            else:
                for t in range(l):
                    d += shape[t] * shape[t]
            d /= l
            best = min(best, d)
        out[r] = best
    return out


def shapelet_distances(shape: np.ndarray, series: np.ndarray) -> np.ndarray:
    return _min_dists(
        np.ascontiguousarray(shape, dtype=float),
        np.ascontiguousarray(np.atleast_2d(series), dtype=float),
    )


def znorm1(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    sd = x.std()
    if sd <= np.sqrt(1e-12):
        return np.zeros_like(x)
    return (x - x.mean()) / sd


def entropy(counts) -> float:
    """Shannon entropy in bits of a class-count vector."""
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log2(p)).sum())


def best_threshold(dist: np.ndarray, y: np.ndarray, n_classes: int):
    """Best information-gain split of ``dist``: returns (gain, threshold) or None."""
    order = np.argsort(dist, kind="stable")
    ds, ys = dist[order], y[order]
    n = len(ys)
    cum = np.cumsum(np.eye(n_classes)[ys], axis=0)
    left, total = cum[:-1], cum[-1]
    right = total - left
    nl = np.arange(1, n, dtype=float)
    nr = n - nl

    def ent(c, m):
        p = c / m[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, p * np.log2(p), 0.0)
        return -terms.sum(axis=1)

    gain = entropy(total) - (nl * ent(left, nl) + nr * ent(right, nr)) / n
    valid = ds[1:] > ds[:-1]
    if not valid.any():
        return None
    gain = np.where(valid, gain, -np.inf)
    k = int(np.argmax(gain))
    return float(gain[k]), float(0.5 * (ds[k] + ds[k + 1]))


@dataclass(frozen=True, eq=False)
class ShapeletNode:
    counts: np.ndarray
    channel: int = -1
    shape: np.ndarray | None = None
    threshold: float = 0.0
    left: ShapeletNode | None = None
    right: ShapeletNode | None = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def to_dict(self) -> dict:
        d = {"counts": self.counts.tolist()}
        if not self.is_leaf:
            d.update(
                channel=self.channel,
                shape=self.shape.tolist(),
                threshold=self.threshold,
                left=self.left.to_dict(),
                right=self.right.to_dict(),
            )
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ShapeletNode:
        counts = np.asarray(d["counts"], dtype=float)
        if "left" not in d:
            return cls(counts)
        return cls(
            counts,
            channel=int(d["channel"]),
            shape=np.asarray(d["shape"], dtype=float),
            threshold=float(d["threshold"]),
            left=cls.from_dict(d["left"]),
            right=cls.from_dict(d["right"]),
        )

    def route(self, X: np.ndarray) -> np.ndarray:
        """Boolean mask: which rows of ``X`` (n, channels, L) go left."""
        return shapelet_distances(self.shape, X[:, self.channel]) <= self.threshold

    def leaf_counts(self, X: np.ndarray) -> np.ndarray:
        out = np.empty((len(X), len(self.counts)))
        self._fill(X, np.arange(len(X)), out)
        return out

    def _fill(self, X, idx, out):
        if self.is_leaf or len(idx) == 0:
            out[idx] = self.counts
            return
        go = self.route(X[idx])
        self.left._fill(X, idx[go], out)
        self.right._fill(X, idx[~go], out)

    def depth(self) -> int:
        return 0 if self.is_leaf else 1 + max(self.left.depth(), self.right.depth())


def _candidates(n_series, n_channels, L, min_len, max_len, cap, rng):
    """Yield (series, channel, start, length) in a deterministic order."""
    lengths = np.arange(min_len, max_len + 1)
    per_len = L - lengths + 1
    per_channel = int(per_len.sum())
    total = n_series * n_channels * per_channel
    if total <= cap:
        picks = np.arange(total)
    else:
        picks = np.sort(rng.choice(total, cap, replace=False))
    bounds = np.cumsum(per_len)
    for p in picks:
        s, rem = divmod(int(p), n_channels * per_channel)
        c, off = divmod(rem, per_channel)
        li = int(np.searchsorted(bounds, off, side="right"))
        start = off - (int(bounds[li - 1]) if li else 0)
        yield s, c, start, int(lengths[li])


def grow_shapelet_tree(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    min_len: int = 3,
    max_len: int | None = None,
    candidates: int = 10000,
    max_depth: int = 10,
    seed: int = 0,
) -> ShapeletNode:
    """``X`` is (n, channels, L), already z-normalised per channel."""
    L = X.shape[2]
    max_len = max(min_len, L // 2) if max_len is None else min(max_len, L)
    if L < min_len:
        raise ValueError(f"series of length {L} shorter than min_len {min_len}")
    counter = iter(range(1 << 30))

    def grow(idx, depth):
        counts = np.bincount(y[idx], minlength=n_classes).astype(float)
        if (counts > 0).sum() <= 1 or depth >= max_depth:
            return ShapeletNode(counts)
        rng = np.random.default_rng([seed, next(counter)])
        Xn, yn = X[idx], y[idx]
        best = None
        for s, c, start, length in _candidates(
            len(idx), X.shape[1], L, min_len, max_len, candidates, rng
        ):
            shape = znorm1(Xn[s, c, start : start + length])
            found = best_threshold(shapelet_distances(shape, Xn[:, c]), yn, n_classes)
            if found is not None and found[0] > 1e-12 and (best is None or found[0] > best[0]):
                best = (found[0], found[1], c, shape)
        if best is None:
            return ShapeletNode(counts)
        _, thr, c, shape = best
        go = shapelet_distances(shape, Xn[:, c]) <= thr
        return ShapeletNode(
            counts,
            channel=c,
            shape=shape,
            threshold=thr,
            left=grow(idx[go], depth + 1),
            right=grow(idx[~go], depth + 1),
        )

    return grow(np.arange(len(y)), 0)
