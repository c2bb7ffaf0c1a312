"""Correlation-based ranking of HPC events against website labels.

A nominal label enters the Pearson formula one class at a time: each class
becomes a 0/1 indicator, and the absolute correlations are averaged with
class-frequency weights.
"""
from __future__ import annotations

import json
import os
import warnings
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Dataset, LeakedWebError, event_sort_key

POLICIES = ("per_sample", "per_trace_summary")


class RankingError(LeakedWebError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class InstanceMatrix:
    rows: np.ndarray  # (n_instances, n_columns)
    labels: tuple[str, ...]
    columns: tuple[str, ...]
    # column indices belonging to each event
    event_columns: dict[str, tuple[int, ...]]

    def __post_init__(self):
        if len(self.rows) != len(self.labels):
            raise ValueError("row count must equal label count")
        if np.isnan(self.rows).any():
            raise ValueError("instance matrix has missing values")


def build_instances(dataset: Dataset, policy: str = "per_sample") -> InstanceMatrix:
    events = dataset.events
    if policy == "per_sample":
        rows = np.vstack([t.samples for t in dataset.traces]).astype(float)
        labels = tuple(t.label for t in dataset.traces for _ in range(t.n_samples))
        return InstanceMatrix(rows, labels, events, {e: (i,) for i, e in enumerate(events)})
    if policy == "per_trace_summary":
        rows = np.array(
            [
                np.column_stack([t.samples.mean(axis=0), t.samples.std(axis=0)]).ravel()
                for t in dataset.traces
            ],
            dtype=float,
        )
        cols = tuple(f"{e}:{stat}" for e in events for stat in ("mean", "std"))
        groups = {e: (2 * i, 2 * i + 1) for i, e in enumerate(events)}
        return InstanceMatrix(rows, tuple(t.label for t in dataset.traces), cols, groups)
    raise ValueError(f"unknown instance policy {policy!r}")


def _abs_pearson(x: np.ndarray, ind: np.ndarray) -> float:
    xc = x - x.mean()
    ic = ind - ind.mean()
    denom = np.sqrt((xc @ xc) * (ic @ ic))
    return float(min(1.0, abs(xc @ ic) / denom))


def score_column(column: np.ndarray, labels: Sequence[str]) -> float:
    """Class-frequency-weighted mean of |Pearson(column, 1[label == c])|."""
    column = np.asarray(column, dtype=float)
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise RankingError("need at least two classes to score a feature")
    if column.std() == 0 or np.ptp(column) == 0:
        warnings.warn("zero-variance feature scored 0")
        return 0.0
    total = 0.0
    for c, n in zip(classes, counts):
        total += n * _abs_pearson(column, (labels == c).astype(float))
    return total / counts.sum()


def score_feature(matrix: InstanceMatrix, event_index: int) -> float:
    """Score one column of the instance matrix, in [0, 1]."""
    return score_column(matrix.rows[:, event_index], matrix.labels)


@dataclass(frozen=True)
class FeatureRanking:
    entries: tuple[tuple[str, float], ...]
    n_traces: int = 0
    n_classes: int = 0
    policy: str = "per_sample"

    def top_k(self, k: int) -> tuple[str, ...]:
        if not 1 <= k <= len(self.entries):
            raise ValueError(f"k must be in 1..{len(self.entries)}")
        return tuple(name for name, _ in self.entries[:k])

    @property
    def events(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.entries)

    def to_json(self) -> str:
        return json.dumps(
            {
                "entries": [{"event": e, "score": s} for e, s in self.entries],
                "computed_over": {"n_traces": self.n_traces, "n_classes": self.n_classes},
                "policy": self.policy,
            },
            indent=1,
        ) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | os.PathLike) -> FeatureRanking:
        d = json.loads(Path(path).read_text())
        over = d.get("computed_over", {})
        return cls(
            tuple((e["event"], float(e["score"])) for e in d["entries"]),
            over.get("n_traces", 0),
            over.get("n_classes", 0),
            d.get("policy", "per_sample"),
        )


def rank_features(dataset: Dataset, policy: str = "per_sample") -> FeatureRanking:
    """Score every event column; order by score, then table rank, then name."""
    present = {t.label for t in dataset.traces}
    if len(present) < 2:
        raise RankingError("ranking needs a dataset with at least two classes")
    matrix = build_instances(dataset, policy)
    scores = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for event, cols in matrix.event_columns.items():
            # summary policy: an event scores as its best summary statistic
            scores[event] = float(max(score_feature(matrix, c) for c in cols))
    flat = [e for e, s in scores.items() if s == 0.0]
    if flat:
        warnings.warn(f"zero-variance events ranked last: {', '.join(flat)}")
    order = sorted(scores, key=lambda e: (-scores[e], *event_sort_key(e)))
    return FeatureRanking(
        tuple((e, scores[e]) for e in order), len(dataset), len(present), policy
    )
