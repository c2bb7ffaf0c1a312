"""Bag-of-Patterns: sliding-window SAX words counted without order."""
from __future__ import annotations

from collections import Counter
from collections.abc import Mapping, Sequence

import numpy as np
from scipy.stats import norm

FLAT_VARIANCE = 1e-9


def sax_breakpoints(alphabet: int) -> np.ndarray:
    """Equiprobable cut points of the standard normal."""
    return norm.ppf(np.arange(1, alphabet) / alphabet)


def paa(x: np.ndarray, segments: int) -> np.ndarray:
    """Piecewise aggregate means; handles lengths not divisible by ``segments``."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n % segments == 0:
        return x.reshape(segments, -1).mean(axis=1)
    return np.repeat(x, segments).reshape(segments, n).mean(axis=1)


def sax_word(window: np.ndarray, segments: int, alphabet: int, cuts=None) -> str:
    cuts = sax_breakpoints(alphabet) if cuts is None else cuts
    window = np.asarray(window, dtype=float)
    if window.var() < FLAT_VARIANCE:
        return chr(ord("a") + alphabet // 2) * segments
    z = (window - window.mean()) / window.std()
    symbols = np.searchsorted(cuts, paa(z, segments), side="right")
    return "".join(chr(ord("a") + int(s)) for s in symbols)


def bop_transform(
    sequence: Sequence[float],
    window: int = 24,
    paa_segments: int = 6,
    alphabet: int = 4,
) -> Counter:
    seq = np.asarray(sequence, dtype=float)
    if len(seq) < window:
        raise ValueError(f"sequence of length {len(seq)} shorter than window {window}")
    cuts = sax_breakpoints(alphabet)
    bag: Counter = Counter()
    last = None
    for start in range(len(seq) - window + 1):
        word = sax_word(seq[start : start + window], paa_segments, alphabet, cuts)
        # numerosity reduction: a run of identical words counts once
        if word != last:
            bag[word] += 1
        last = word
    return bag


def multivariate_bag(channels: np.ndarray, events: Sequence[str], **params) -> Counter:
    bag: Counter = Counter()
    for name, channel in zip(events, channels):
        for word, n in bop_transform(channel, **params).items():
            bag[f"{name}:{word}"] += n
    return bag


def histogram_matrix(bags: Sequence[Mapping[str, int]], vocab: Mapping[str, int]) -> np.ndarray:
    H = np.zeros((len(bags), len(vocab)))
    for i, bag in enumerate(bags):
        for word, n in bag.items():
            j = vocab.get(word)
            if j is not None:
                H[i, j] = n
    return H


def squared_distances(H: np.ndarray, bag: Mapping[str, int], vocab: Mapping[str, int]):
    """Squared Euclidean distance from ``bag`` to each row of ``H`` on the
    union vocabulary; also reports whether any word was shared."""
    q = histogram_matrix([bag], vocab)[0]
    unseen = sum(n * n for w, n in bag.items() if w not in vocab)
    d = ((H - q) ** 2).sum(axis=1) + unseen
    overlap = bool(((H > 0) & (q > 0)).any())
    return d, overlap
