"""Trained models for every classifier family, their JSON file format, and
prediction dispatch."""
from __future__ import annotations

import json
import os
import warnings
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..core import Dataset, LeakedWebError, Trace
from . import bop as _bop
from .boosting import fit_logitboost, logitboost_proba
from .dtw import dtw_to_many, knn_vote
from .forest import fit_forest, forest_votes
from .shapelet import ShapeletNode, grow_shapelet_tree
from .trees import Tree
from .views import flat_matrix, znorm_channels

FORMAT_VERSION = 1
FAMILIES = ("random_forest", "logit_boost", "dtw_knn", "bop", "shapelet")
ALIASES = {
    "rf": "random_forest",
    "randomforest": "random_forest",
    "logitboost": "logit_boost",
    "logit-randomf": "logit_boost",
    "dtwknn": "dtw_knn",
    "dtw": "dtw_knn",
}


def family_name(name: str) -> str:
    key = name.lower()
    fam = ALIASES.get(key, key)
    if fam not in FAMILIES:
        raise ValueError(f"unknown classifier family {name!r}")
    return fam


class ModelFormatError(LeakedWebError, ValueError):
    pass


@dataclass(frozen=True)
class RandomForestParams:
    n_trees: int = 100
    max_depth: int | None = None
    min_leaf: int = 1
    features_per_split: str | int | float = "sqrt"
    seed: int = 0


@dataclass(frozen=True)
class LogitBoostParams:
    n_stages: int = 100
    shrinkage: float = 1.0
    max_depth: int = 3
    features_per_split: str | int | float = "sqrt"
    min_leaf: int = 1
    seed: int = 0


@dataclass(frozen=True)
class DtwKnnParams:
    k: int = 1
    window: int | None = None


@dataclass(frozen=True)
class BopParams:
    window: int = 24
    paa_segments: int = 6
    alphabet: int = 4


@dataclass(frozen=True)
class ShapeletParams:
    min_len: int = 3
    max_len: int | None = None
    candidates: int = 10000
    max_depth: int = 10
    seed: int = 0


PARAMS = {
    "random_forest": RandomForestParams,
    "logit_boost": LogitBoostParams,
    "dtw_knn": DtwKnnParams,
    "bop": BopParams,
    "shapelet": ShapeletParams,
}


@dataclass(frozen=True)
class PredictionResult:
    label: str
    scores: dict[str, float]

    @classmethod
    def from_scores(cls, classes: Sequence[str], raw: np.ndarray) -> PredictionResult:
        raw = np.clip(np.asarray(raw, dtype=float), 0.0, None)
        total = raw.sum()
        p = raw / total if total > 0 else np.full(len(classes), 1.0 / len(classes))
        return cls(classes[int(np.argmax(p))], {c: float(v) for c, v in zip(classes, p)})


@dataclass(frozen=True, eq=False)
class TrainedModel:
    family: str
    class_list: tuple[str, ...]
    events: tuple[str, ...]
    length: int
    params: dict[str, Any]
    state: dict[str, Any] = field(repr=False)
    format_version: int = FORMAT_VERSION

    # ---------------------------------------------------------- serialisation
    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "family": self.family,
            "class_list": list(self.class_list),
            "events": list(self.events),
            "length": self.length,
            "params": self.params,
            "state": _encode_state(self.family, self.state),
        }

    def to_json(self) -> bytes:
        return (json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n").encode()

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_bytes(self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> TrainedModel:
        if d.get("format_version") != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported model format {d.get('format_version')!r}")
        family = family_name(d["family"])
        return cls(
            family=family,
            class_list=tuple(d["class_list"]),
            events=tuple(d["events"]),
            length=int(d["length"]),
            params=d["params"],
            state=_decode_state(family, d["state"]),
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> TrainedModel:
        try:
            return cls.from_dict(json.loads(Path(path).read_bytes()))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ModelFormatError(f"{path}: not a model file ({exc})") from exc


def _encode_state(family: str, state: dict) -> dict:
    if family == "random_forest":
        return {"trees": [t.to_dict() for t in state["trees"]]}
    if family == "logit_boost":
        return {"stages": [[t.to_dict() for t in s] for s in state["stages"]]}
    if family == "dtw_knn":
        return {"prototypes": state["prototypes"].tolist(), "labels": state["labels"].tolist()}
    if family == "bop":
        return {
            "vocab": state["vocab"],
            "hist": state["hist"].tolist(),
            "labels": state["labels"].tolist(),
            "window": state["window"],
        }
    return {"root": state["root"].to_dict()}


def _decode_state(family: str, d: dict) -> dict:
    if family == "random_forest":
        return {"trees": [Tree.from_dict(t) for t in d["trees"]]}
    if family == "logit_boost":
        return {"stages": [[Tree.from_dict(t) for t in s] for s in d["stages"]]}
    if family == "dtw_knn":
        return {
            "prototypes": np.asarray(d["prototypes"], dtype=float),
            "labels": np.asarray(d["labels"], dtype=np.int64),
        }
    if family == "bop":
        hist = np.asarray(d["hist"], dtype=float).reshape(len(d["labels"]), len(d["vocab"]))
        return {
            "vocab": list(d["vocab"]),
            "hist": hist,
            "labels": np.asarray(d["labels"], dtype=np.int64),
            "window": int(d["window"]),
        }
    return {"root": ShapeletNode.from_dict(d["root"])}


# ------------------------------------------------------------------- training


class TrainingError(LeakedWebError, ValueError):
    pass


def _prepare(train: Dataset, events: Sequence[str] | None, min_classes: int = 2):
    events = tuple(events) if events is not None else train.events
    classes = tuple(c for c in train.class_list if any(t.label == c for t in train))
    if len(classes) < min_classes:
        raise TrainingError(f"need at least {min_classes} classes, got {len(classes)}")
    index = {c: i for i, c in enumerate(classes)}
    y = np.array([index[t.label] for t in train.traces], dtype=np.int64)
    length = max(t.n_samples for t in train.traces)
    return events, classes, y, length


def _model(family, classes, events, length, params, state) -> TrainedModel:
    return TrainedModel(family, classes, events, length, asdict(params), state)


def train_random_forest(train: Dataset, params: RandomForestParams | None = None,
                        events: Sequence[str] | None = None) -> TrainedModel:
    params = params or RandomForestParams()
    events, classes, y, length = _prepare(train, events)
    X = flat_matrix(train.traces, events, length)
    trees = fit_forest(
        X, y, len(classes),
        n_trees=params.n_trees, max_depth=params.max_depth, min_leaf=params.min_leaf,
        features_per_split=params.features_per_split, seed=params.seed,
    )
    return _model("random_forest", classes, events, length, params, {"trees": trees})


def train_logit_boost(train: Dataset, params: LogitBoostParams | None = None,
                      events: Sequence[str] | None = None, on_stage=None) -> TrainedModel:
    params = params or LogitBoostParams()
    events, classes, y, length = _prepare(train, events)
    X = flat_matrix(train.traces, events, length)
    stages = fit_logitboost(
        X, y, len(classes),
        n_stages=params.n_stages, shrinkage=params.shrinkage, max_depth=params.max_depth,
        features_per_split=params.features_per_split, min_leaf=params.min_leaf,
        seed=params.seed, on_stage=on_stage,
    )
    return _model("logit_boost", classes, events, length, params, {"stages": stages})


def train_dtw_knn(train: Dataset, params: DtwKnnParams | None = None,
                  events: Sequence[str] | None = None) -> TrainedModel:
    params = params or DtwKnnParams()
    events, classes, y, length = _prepare(train, events, min_classes=1)
    protos = znorm_channels(train.traces, events, length)
    return _model("dtw_knn", classes, events, length, params,
                  {"prototypes": protos, "labels": y})


def _bop_settings(params: BopParams, length: int) -> dict:
    window = params.window
    if length < window:
        warnings.warn(f"BOP window {window} exceeds trace length {length}; shrinking")
        window = length
    return dict(window=window, paa_segments=min(params.paa_segments, window),
                alphabet=params.alphabet)


def train_bop(train: Dataset, params: BopParams | None = None,
              events: Sequence[str] | None = None) -> TrainedModel:
    params = params or BopParams()
    events, classes, y, length = _prepare(train, events, min_classes=1)
    settings = _bop_settings(params, length)
    X = znorm_channels(train.traces, events, length)
    bags = [_bop.multivariate_bag(x, events, **settings) for x in X]
    vocab = sorted(set().union(*bags))
    hist = _bop.histogram_matrix(bags, {w: i for i, w in enumerate(vocab)})
    return _model("bop", classes, events, length, params,
                  {"vocab": vocab, "hist": hist, "labels": y, "window": settings["window"]})


def train_shapelet(train: Dataset, params: ShapeletParams | None = None,
                   events: Sequence[str] | None = None) -> TrainedModel:
    params = params or ShapeletParams()
    events, classes, y, length = _prepare(train, events, min_classes=1)
    X = znorm_channels(train.traces, events, length)
    root = grow_shapelet_tree(
        X, y, len(classes),
        min_len=params.min_len, max_len=params.max_len, candidates=params.candidates,
        max_depth=params.max_depth, seed=params.seed,
    )
    return _model("shapelet", classes, events, length, params, {"root": root})


TRAINERS = {
    "random_forest": train_random_forest,
    "logit_boost": train_logit_boost,
    "dtw_knn": train_dtw_knn,
    "bop": train_bop,
    "shapelet": train_shapelet,
}


def train(family: str, dataset: Dataset, params=None, events=None) -> TrainedModel:
    """Train any family; ``params`` may be a params dataclass or a plain dict."""
    family = family_name(family)
    cls = PARAMS[family]
    if params is None:
        params = cls()
    elif isinstance(params, dict):
        params = cls(**params)
    return TRAINERS[family](dataset, params, events=events)


# ----------------------------------------------------------------- prediction


def _raw_scores(model: TrainedModel, traces: Sequence[Trace]) -> np.ndarray:
    fam, st, C = model.family, model.state, len(model.class_list)
    if fam == "random_forest":
        X = flat_matrix(traces, model.events, model.length)
        return forest_votes(st["trees"], X, C).astype(float)
    if fam == "logit_boost":
        X = flat_matrix(traces, model.events, model.length)
        return logitboost_proba(st["stages"], X, model.params["shrinkage"])
    if fam == "dtw_knn":
        X = znorm_channels(traces, model.events, model.length)
        out = np.zeros((len(traces), C))
        k = model.params["k"]
        for i, x in enumerate(X):
            dist = dtw_to_many(x, st["prototypes"], model.params["window"])
            label, votes = knn_vote(dist, st["labels"], C, k)
            out[i] = votes
            # a tied vote is settled by knn_vote; keep the winner strictly on top
            out[i, label] += 0.5
        return out
    if fam == "bop":
        settings = _bop_settings(BopParams(**model.params), model.length)
        settings["window"] = st["window"]
        vocab = {w: i for i, w in enumerate(st["vocab"])}
        prior = np.bincount(st["labels"], minlength=C).astype(float)
        X = znorm_channels(traces, model.events, model.length)
        out = np.zeros((len(traces), C))
        for i, x in enumerate(X):
            bag = _bop.multivariate_bag(x, model.events, **settings)
            d, overlap = _bop.squared_distances(st["hist"], bag, vocab)
            if not overlap:
                out[i] = prior
                continue
            out[i] = _softmin_by_class(d, st["labels"], C)
        return out
    X = znorm_channels(traces, model.events, model.length)
    return st["root"].leaf_counts(X)


def _softmin_by_class(d: np.ndarray, labels: np.ndarray, C: int) -> np.ndarray:
    """Per-class nearest distance turned into pseudo-probabilities; the
    nearest class always gets the top score."""
    best = np.full(C, np.inf)
    np.minimum.at(best, labels, d)
    finite = np.isfinite(best)
    gap = best[finite] - best[finite].min()
    scale = gap.mean() if gap.mean() > 0 else 1.0
    out = np.zeros(C)
    out[finite] = np.exp(-gap / scale)
    return out


def predict_many(model: TrainedModel, traces: Sequence[Trace]) -> list[PredictionResult]:
    raw = _raw_scores(model, traces)
    return [PredictionResult.from_scores(model.class_list, r) for r in raw]


def predict(model: TrainedModel, trace: Trace) -> PredictionResult:
    return predict_many(model, [trace])[0]
