"""Metrics, open-world preparation, and the accuracy sweeps over training
traces, feature count and samples per trace."""
from __future__ import annotations

import csv
import io
import json
import warnings
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .core import (
    DEFAULT_TRAIN_FRACTION,
    NON_SENSITIVE,
    Dataset,
    LeakedWebError,
    SplitSpec,
    split,
)
from .features import rank_features
from .learners.model import PARAMS, TrainedModel, family_name, predict_many, train
from .synth import GeneratorConfig, generate


class EvaluationError(LeakedWebError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    classes: tuple[str, ...]
    counts: np.ndarray  # rows actual, columns predicted

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64)
        if counts.shape != (len(self.classes), len(self.classes)):
            raise ValueError("confusion matrix must be square over the class list")
        if (counts < 0).any():
            raise ValueError("confusion counts must be non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_pairs(cls, classes: Sequence[str], pairs: Iterable[tuple[str, str]]):
        index = {c: i for i, c in enumerate(classes)}
        counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
        for actual, predicted in pairs:
            counts[index[actual], index[predicted]] += 1
        return cls(tuple(classes), counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other):
        return (
            isinstance(other, ConfusionMatrix)
            and self.classes == other.classes
            and np.array_equal(self.counts, other.counts)
        )


@dataclass(frozen=True)
class ClassMetrics:
    label: str
    precision: float
    recall: float
    f_measure: float
    support: int


def f_measure(p: float, r: float) -> float:
    return 2 * (p * r) / (p + r) if p + r > 0 else 0.0


@dataclass(frozen=True)
class EvalReport:
    """All metrics are derived from the confusion matrix."""

    confusion: ConfusionMatrix
    sweep_coords: dict = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        # integer counts, one division
        return int(np.trace(self.confusion.counts)) / self.confusion.total

    @property
    def per_class(self) -> tuple[ClassMetrics, ...]:
        C = self.confusion.counts
        out = []
        for i, label in enumerate(self.confusion.classes):
            tp = int(C[i, i])
            col, row = int(C[:, i].sum()), int(C[i].sum())
            p = tp / col if col else 0.0
            r = tp / row if row else 0.0
            out.append(ClassMetrics(label, p, r, f_measure(p, r), row))
        return tuple(out)

    @property
    def macro_f(self) -> float:
        pcs = [m for m in self.per_class if m.support > 0]
        return float(np.mean([m.f_measure for m in pcs])) if pcs else 0.0

    @property
    def weighted_f(self) -> float:
        pcs = self.per_class
        total = sum(m.support for m in pcs)
        return sum(m.f_measure * m.support for m in pcs) / total if total else 0.0

    def to_dict(self) -> dict:
        return {
            "sweep_coords": self.sweep_coords,
            "accuracy": self.accuracy,
            "macro_f": self.macro_f,
            "weighted_f": self.weighted_f,
            "per_class": [
                {"label": m.label, "precision": m.precision, "recall": m.recall,
                 "f_measure": m.f_measure, "support": m.support}
                for m in self.per_class
            ],
            "confusion": {
                "classes": list(self.confusion.classes),
                "counts": self.confusion.counts.tolist(),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        conf = d["confusion"]
        return cls(ConfusionMatrix(tuple(conf["classes"]), conf["counts"]), dict(d["sweep_coords"]))

    def __eq__(self, other):
        return (
            isinstance(other, EvalReport)
            and self.confusion == other.confusion
            and self.sweep_coords == other.sweep_coords
        )


def evaluate(model: TrainedModel, test: Dataset, coords: dict | None = None,
             allow_unknown: bool = False) -> EvalReport:
    """Predict every test trace and tabulate. ``allow_unknown`` admits test
    labels the model never saw (they can only be misclassified)."""
    if not len(test):
        raise EvaluationError("empty test set")
    classes = model.class_list
    unknown = [c for c in dict.fromkeys(t.label for t in test) if c not in classes]
    if unknown and not allow_unknown:
        raise EvaluationError(f"test labels not known to the model: {unknown}")
    preds = predict_many(model, test.traces)
    confusion = ConfusionMatrix.from_pairs(
        classes + tuple(unknown), ((t.label, p.label) for t, p in zip(test.traces, preds))
    )
    return EvalReport(confusion, dict(coords or {}))


# ----------------------------------------------------------------- open world


def open_world_prepare(closed: Dataset, extra_non_sensitive: Dataset) -> Dataset:
    """Merge unmonitored-site traces, relabelled as the non-sensitive class."""
    if not len(extra_non_sensitive):
        raise EvaluationError("open world needs at least one non-sensitive trace")
    if NON_SENSITIVE in closed.class_list:
        raise EvaluationError(f"closed dataset already has a {NON_SENSITIVE!r} class")
    sensitive = set(closed.class_list)
    extras, seen = [], set()
    for t in extra_non_sensitive.traces:
        if t.label in sensitive:
            raise EvaluationError(f"non-sensitive trace labelled as monitored site {t.label!r}")
        key = (t.events, t.samples.tobytes())
        if key in seen:
            warnings.warn(f"duplicate non-sensitive trace from {t.label!r} dropped")
            continue
        seen.add(key)
        extras.append(t.replace(label=NON_SENSITIVE))
    return Dataset(
        closed.traces + tuple(extras), "open", closed.class_list + (NON_SENSITIVE,)
    )


# --------------------------------------------------------------------- sweeps

AXES = ("train_traces", "n_features", "samples")


@dataclass(frozen=True)
class SweepSpec:
    families: tuple[str, ...] = ("logit_boost",)
    train_traces_grid: tuple[int, ...] = (50, 40, 30, 20, 10, 5)
    feature_count_grid: tuple[int, ...] = (8, 6, 4, 2)
    samples_grid: tuple[int, ...] = (60, 40, 20, 10, 5)
    axes: tuple[str, ...] = AXES
    world: str = "closed"
    repetitions: int = 1
    seed: int = 0
    # values held fixed on the axes not being swept
    base_train_traces: int = 50
    base_features: int = 4
    base_samples: int = 60
    train_fraction: float = DEFAULT_TRAIN_FRACTION
    ranking_policy: str = "per_sample"
    family_params: dict = field(default_factory=dict)
    # "split": non-sensitive traces split like any class; "test_only": never trained on
    open_world_mode: str = "split"

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.open_world_mode not in ("split", "test_only"):
            raise ValueError(f"unknown open_world_mode {self.open_world_mode!r}")
        for axis in self.axes:
            if axis not in AXES:
                raise ValueError(f"unknown sweep axis {axis!r}")
            if not self.grid(axis):
                raise ValueError(f"empty grid for axis {axis!r}")
        object.__setattr__(self, "families", tuple(family_name(f) for f in self.families))

    def grid(self, axis: str) -> tuple[int, ...]:
        return {
            "train_traces": self.train_traces_grid,
            "n_features": self.feature_count_grid,
            "samples": self.samples_grid,
        }[axis]

    def points(self):
        """(axis, n_train_traces, n_features, samples_per_trace) in grid order."""
        for axis in self.axes:
            for v in self.grid(axis):
                yield (
                    axis,
                    v if axis == "train_traces" else self.base_train_traces,
                    v if axis == "n_features" else self.base_features,
                    v if axis == "samples" else self.base_samples,
                )


def subsample_train(train: Dataset, n_per_class: int) -> Dataset:
    """Keep the first ``n_per_class`` traces of each monitored class; the
    pooled non-sensitive class is kept whole."""
    kept, seen = [], {}
    for t in train.traces:
        if t.label == NON_SENSITIVE:
            kept.append(t)
            continue
        if seen.get(t.label, 0) < n_per_class:
            kept.append(t)
            seen[t.label] = seen.get(t.label, 0) + 1
    return train.with_traces(kept)


def _repetition_seed(base: int, rep: int) -> int:
    return base + rep


def run_point(train_full: Dataset, test_full: Dataset, family: str, n_train: int,
              n_features: int, samples: int, seed: int, params: dict | None = None,
              ranking_policy: str = "per_sample", coords: dict | None = None,
              allow_unknown: bool = False) -> EvalReport:
    tr = subsample_train(train_full, n_train).truncate(samples)
    te = test_full.truncate(samples)
    ranking = rank_features(tr, ranking_policy)
    events = ranking.top_k(n_features)
    params = dict(params or {})
    if "seed" in _param_fields(family):
        params.setdefault("seed", seed)
    model = train(family, tr, params, events=events)
    coords = dict(coords or {})
    coords.update(family=family, n_train_traces=n_train, n_features=n_features,
                  samples_per_trace=samples, events=list(events))
    return evaluate(model, te, coords, allow_unknown=allow_unknown)


def _param_fields(family: str) -> set[str]:
    return {f.name for f in fields(PARAMS[family])}


def run_sweep(source: GeneratorConfig | Dataset, spec: SweepSpec) -> list[EvalReport]:
    """One report per (grid point, family, repetition), ordered by grid
    coordinates. Feature ranking only ever sees the training split."""
    reports = []
    for rep in range(spec.repetitions):
        seed = _repetition_seed(spec.seed, rep)
        if isinstance(source, GeneratorConfig):
            dataset = generate(replace(source, seed=source.seed + rep))
        else:
            dataset = source
        train_full, test_full = split(dataset, SplitSpec(spec.train_fraction, seed))
        test_only = spec.open_world_mode == "test_only" and NON_SENSITIVE in dataset.class_list
        if test_only:
            pooled = [t for t in train_full.traces if t.label == NON_SENSITIVE]
            train_full = train_full.with_traces(
                t for t in train_full.traces if t.label != NON_SENSITIVE)
            test_full = test_full.with_traces(test_full.traces + tuple(pooled))
        per_class = {}
        for t in train_full.traces:
            per_class[t.label] = per_class.get(t.label, 0) + 1
        max_train = min(v for k, v in per_class.items() if k != NON_SENSITIVE)
        n_events = len(dataset.events)
        n_samples = min(t.n_samples for t in dataset.traces)
        for axis, n_train, n_feat, samples in spec.points():
            base = dict(axis=axis, world=spec.world, repetition=rep, seed=seed)
            if n_train > max_train or n_feat > n_events or samples > n_samples:
                warnings.warn(
                    f"sweep point skipped, exceeds available data: {axis} "
                    f"(traces={n_train}, features={n_feat}, samples={samples})"
                )
                continue
            for family in spec.families:
                reports.append(
                    run_point(
                        train_full, test_full, family, n_train, n_feat, samples, seed,
                        spec.family_params.get(family), spec.ranking_policy, base,
                        allow_unknown=test_only,
                    )
                )
    return sorted(reports, key=_grid_key(spec))


def _grid_key(spec: SweepSpec):
    order = {}
    for i, (axis, n, f, s) in enumerate(spec.points()):
        order.setdefault((axis, n, f, s), i)
    fams = {f: i for i, f in enumerate(spec.families)}

    def key(r: EvalReport):
        c = r.sweep_coords
        point = (c["axis"], c["n_train_traces"], c["n_features"], c["samples_per_trace"])
        return (order[point], fams[c["family"]], c["repetition"])

    return key


def mean_accuracy(reports: Sequence[EvalReport], axis: str, coord: str) -> dict:
    """Mean accuracy per grid value along one sweep axis."""
    acc: dict = {}
    for r in reports:
        if r.sweep_coords.get("axis") == axis:
            acc.setdefault(r.sweep_coords[coord], []).append(r.accuracy)
    return {k: float(np.mean(v)) for k, v in acc.items()}


# -------------------------------------------------------------------- reports

COLUMNS = ("axis", "family", "world", "n_train_traces", "n_features",
           "samples_per_trace", "repetition", "seed", "accuracy", "macro_f", "weighted_f")
FORMATS = ("json", "csv", "markdown")


def _row(report: EvalReport) -> list:
    c = report.sweep_coords
    metrics = {"accuracy": report.accuracy, "macro_f": report.macro_f,
               "weighted_f": report.weighted_f}
    row = []
    for col in COLUMNS:
        v = metrics[col] if col in metrics else c.get(col, "")
        row.append(f"{v:.4f}" if isinstance(v, float) else str(v))
    return row


def emit_report(reports: Sequence[EvalReport], fmt: str = "json") -> bytes:
    if not reports:
        raise EvaluationError("no reports to emit")
    if fmt == "json":
        return (json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True) + "\n").encode()
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in reports:
            w.writerow(_row(r))
        return buf.getvalue().encode()
    if fmt in ("markdown", "markdown-table", "md"):
        lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "---|" * len(COLUMNS)]
        lines += ["| " + " | ".join(_row(r)) + " |" for r in reports]
        return ("\n".join(lines) + "\n").encode()
    raise EvaluationError(f"unknown report format {fmt!r}")


def load_reports(data: bytes | str) -> list[EvalReport]:
    return [EvalReport.from_dict(d) for d in json.loads(data)]
