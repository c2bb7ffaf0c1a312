"""Dynamic time warping (absolute-difference cost, optional Sakoe-Chiba band)
and a k-nearest-neighbour classifier on top of it."""
from __future__ import annotations

import numpy as np
from numba import njit

UNCONSTRAINED = -1


@njit(cache=True)
def _dtw(a, b, window):
    n, m = a.shape[0], b.shape[0]
    inf = np.inf
    prev = np.full(m + 1, inf)
    cur = np.full(m + 1, inf)
    prev[0] = 0.0
    for i in range(1, n + 1):
        cur[:] = inf
        lo, hi = 1, m
        if window >= 0:
            lo = max(1, i - window)
            hi = min(m, i + window)
        for j in range(lo, hi + 1):
            best = prev[j - 1]
            best = min(best, prev[j])
            best = min(best, cur[j - 1])
            cur[j] = abs(a[i - 1] - b[j - 1]) + best
        prev, cur = cur, prev
    return prev[m]


@njit(cache=True)
def _dtw_to_many(query, protos, window):
    # query (k, L); protos (N, k, L); per-channel warping, summed
    out = np.zeros(protos.shape[0])
    for p in range(protos.shape[0]):
        total = 0.0
        for c in range(query.shape[0]):
            total += _dtw(query[c], protos[p, c], window)
        out[p] = total
    return out


def _check_window(n: int, m: int, window: int | None) -> int:
    if window is None:
        return UNCONSTRAINED
    if window < abs(n - m):
        raise ValueError(f"window {window} cannot align lengths {n} and {m}")
    return int(window)


def dtw_distance(a, b, window: int | None = None) -> float:
    """DTW between two series. 2-D inputs (channels x time) warp each channel
    independently and sum the per-channel distances."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("DTW needs non-empty sequences")
    if a.ndim == 1:
        a, b = a[None], b[None]
    if a.shape[0] != b.shape[0]:
        raise ValueError("multivariate series need the same channel count")
    w = _check_window(a.shape[1], b.shape[1], window)
    return float(sum(_dtw(a[c], b[c], w) for c in range(a.shape[0])))


def dtw_to_many(query: np.ndarray, protos: np.ndarray, window: int | None = None) -> np.ndarray:
    query = np.ascontiguousarray(query, dtype=float)
    protos = np.ascontiguousarray(protos, dtype=float)
    w = _check_window(query.shape[-1], protos.shape[-1], window)
    return _dtw_to_many(query, protos, w)


def knn_vote(dist: np.ndarray, labels: np.ndarray, n_classes: int, k: int):
    """Majority label among the ``k`` nearest; ties go to the smaller mean
    neighbour distance, then to the earlier class. Returns (label, votes)."""
    k = min(k, len(dist))
    nearest = np.argsort(dist, kind="stable")[:k]
    votes = np.bincount(labels[nearest], minlength=n_classes)
    top = np.flatnonzero(votes == votes.max())
    if len(top) == 1:
        return int(top[0]), votes
    mean_d = [dist[nearest][labels[nearest] == c].mean() for c in top]
    return int(top[int(np.argmin(mean_d))]), votes
