"""Fixed-length numeric views of traces.

Tree learners see the raw flattened counters (event-major); distance-based
time-series learners see per-event z-normalised channels.
"""
from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from ..core import LeakedWebError, Trace


class MissingEventError(LeakedWebError, KeyError):
    pass


def fit_length(samples: np.ndarray, length: int) -> np.ndarray:
    """Truncate, or pad by repeating the last row, to ``length`` rows."""
    n = samples.shape[0]
    if n >= length:
        return samples[:length]
    pad = np.repeat(samples[-1:], length - n, axis=0)
    return np.concatenate([samples, pad], axis=0)


def channels(traces: Sequence[Trace], events: Sequence[str], length: int) -> np.ndarray:
    """Raw counters as a ``(n_traces, n_events, length)`` float array."""
    out = np.empty((len(traces), len(events), length), dtype=float)
    for i, t in enumerate(traces):
        missing = [e for e in events if e not in t.events]
        if missing:
            raise MissingEventError(f"trace lacks event column {missing[0]!r}")
        idx = [t.events.index(e) for e in events]
        out[i] = fit_length(t.samples[:, idx], length).T
    return out


def flat_matrix(traces: Sequence[Trace], events: Sequence[str], length: int) -> np.ndarray:
    return channels(traces, events, length).reshape(len(traces), -1)


def znorm(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Zero-mean unit-variance along ``axis``; constant slices become zeros."""
    x = np.asarray(x, dtype=float)
    mu = x.mean(axis=axis, keepdims=True)
    sd = x.std(axis=axis, keepdims=True)
    centred = x - mu
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(sd > 1e-12, centred / np.where(sd > 1e-12, sd, 1.0), 0.0)
    return out


def znorm_channels(traces: Sequence[Trace], events: Sequence[str], length: int) -> np.ndarray:
    return znorm(channels(traces, events, length), axis=-1)
