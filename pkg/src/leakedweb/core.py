"""Domain types shared by every stage: events, traces, datasets, splits.

Traces are stored as per-interval counter deltas. The on-disk format is a
plain CSV (``t,<event1>,...,<eventK>``) plus a JSON manifest per dataset.
"""
from __future__ import annotations

import csv
import io
import json
import os
import warnings
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

NON_SENSITIVE = "non-sensitive"
SOURCES = ("live", "synthetic", "replay")


class LeakedWebError(Exception):
    """Base class for domain errors (CLI maps these to exit code 1)."""


class TraceInvariantError(LeakedWebError, ValueError):
    pass


class TraceFormatError(LeakedWebError, ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class TraceWriteError(LeakedWebError, OSError):
    def __init__(self, written: int, cause: BaseException):
        self.written = written
        super().__init__(f"trace write failed after {written} bytes: {cause}")


class SplitError(LeakedWebError, ValueError):
    pass


@dataclass(frozen=True)
class EventSpec:
    name: str
    rank: int


# Ranked HPC event list; rank 1 is the most class-correlated event on the
# original Firefox corpus.
EVENTS: tuple[EventSpec, ...] = tuple(
    EventSpec(name, rank)
    for rank, name in enumerate(
        [
            "cache-misses",
            "node-loads",
            "branch-misses",
            "branch-load-misses",
            "LLC-store-misses",
            "branch-loads",
            "L1-dcache-stores",
            "L1-icache-load-misses",
            "branch-instructions",
            "iTLB-loads",
            "iTLB-load-misses",
            "dTLB-store-misses",
            "dTLB-load-misses",
            "dTLB-stores",
            "node-stores",
            "L1-dcache-load-misses",
        ],
        start=1,
    )
)
EVENT_RANK = {e.name: e.rank for e in EVENTS}
DEFAULT_EVENTS = tuple(e.name for e in EVENTS[:4])


def event_sort_key(name: str) -> tuple[int, str]:
    """Order by table rank; events outside the table go last, by name."""
    return (EVENT_RANK.get(name, len(EVENTS) + 1), name)


@dataclass(frozen=True, eq=False)
class Trace:
    """One website visit: ``n_samples x n_events`` counter deltas."""

    label: str
    samples: np.ndarray
    events: tuple[str, ...]
    sampling_rate_hz: float = 1.0
    collected_at: float = 0.0
    source: str = "synthetic"

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.int64, copy=True)
        if samples.ndim == 1 and len(self.events) == 1:
            samples = samples.reshape(-1, 1)
        events = tuple(self.events)
        if samples.ndim != 2 or samples.shape[0] < 1:
            raise TraceInvariantError("trace needs at least one sample row")
        if samples.shape[1] != len(events):
            raise TraceInvariantError(
                f"{samples.shape[1]} sample columns for {len(events)} events"
            )
        if len(set(events)) != len(events):
            raise TraceInvariantError("event names must be distinct")
        if (samples < 0).any():
            raise TraceInvariantError("counter values must be non-negative")
        if not self.sampling_rate_hz > 0:
            raise TraceInvariantError("sampling rate must be positive")
        if self.source not in SOURCES:
            raise TraceInvariantError(f"unknown trace source {self.source!r}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "events", events)
        object.__setattr__(self, "sampling_rate_hz", float(self.sampling_rate_hz))
        object.__setattr__(self, "collected_at", float(self.collected_at))

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    def column(self, event: str) -> np.ndarray:
        return self.samples[:, self.events.index(event)]

    def select(self, events: Sequence[str]) -> Trace:
        missing = [e for e in events if e not in self.events]
        if missing:
            raise KeyError(f"trace has no column {missing[0]!r}")
        idx = [self.events.index(e) for e in events]
        return self.replace(samples=self.samples[:, idx], events=tuple(events))

    def head(self, n: int) -> Trace:
        return self.replace(samples=self.samples[:n])

    def replace(self, **changes) -> Trace:
        kw = dict(
            label=self.label,
            samples=self.samples,
            events=self.events,
            sampling_rate_hz=self.sampling_rate_hz,
            collected_at=self.collected_at,
            source=self.source,
        )
        kw.update(changes)
        return Trace(**kw)

    def __eq__(self, other):
        if not isinstance(other, Trace):
            return NotImplemented
        return (
            self.label == other.label
            and self.events == other.events
            and self.sampling_rate_hz == other.sampling_rate_hz
            and self.collected_at == other.collected_at
            and self.source == other.source
            and np.array_equal(self.samples, other.samples)
        )

    __hash__ = None


@dataclass(frozen=True)
class Dataset:
    traces: tuple[Trace, ...]
    world: str = "closed"
    class_list: tuple[str, ...] = ()

    def __post_init__(self):
        traces = tuple(self.traces)
        if self.world not in ("closed", "open"):
            raise ValueError(f"world must be closed or open, got {self.world!r}")
        classes = tuple(self.class_list) or tuple(
            dict.fromkeys(t.label for t in traces)
        )
        if len(set(classes)) != len(classes):
            raise ValueError("class_list labels must be distinct")
        known = set(classes)
        for t in traces:
            if t.label not in known:
                raise ValueError(f"trace label {t.label!r} not in class_list")
        if self.world == "open" and NON_SENSITIVE not in known:
            raise ValueError(f"open-world dataset needs the {NON_SENSITIVE!r} class")
        if traces:
            events = traces[0].events
            if any(t.events != events for t in traces):
                raise ValueError("all traces must share the same event columns")
        object.__setattr__(self, "traces", traces)
        object.__setattr__(self, "class_list", classes)

    def __len__(self):
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces)

    @property
    def events(self) -> tuple[str, ...]:
        return self.traces[0].events if self.traces else ()

    @property
    def labels(self) -> list[str]:
        return [t.label for t in self.traces]

    def by_class(self) -> dict[str, list[Trace]]:
        out: dict[str, list[Trace]] = {c: [] for c in self.class_list}
        for t in self.traces:
            out[t.label].append(t)
        return out

    def with_traces(self, traces: Iterable[Trace]) -> Dataset:
        return Dataset(tuple(traces), self.world, self.class_list)

    def select_events(self, events: Sequence[str]) -> Dataset:
        return self.with_traces(t.select(events) for t in self.traces)

    def truncate(self, n_samples: int) -> Dataset:
        return self.with_traces(t.head(n_samples) for t in self.traces)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")


# 50 train / 20 test out of 70 traces per site.
DEFAULT_TRAIN_FRACTION = 50 / 70


@dataclass(frozen=True)
class Provenance:
    sampling_rate_hz: float = 1.0
    collected_at: float = 0.0
    source: str = "replay"


# --------------------------------------------------------------------------
# CSV persistence


def trace_csv_bytes(trace: Trace) -> bytes:
    lines = ["t," + ",".join(trace.events)]
    for i, row in enumerate(trace.samples.tolist()):
        lines.append(f"{i}," + ",".join(str(v) for v in row))
    return ("\n".join(lines) + "\n").encode("utf-8")


def write_trace_csv(trace: Trace, destination: BinaryIO) -> int:
    """Write ``trace`` to a binary sink; returns the number of bytes written."""
    written = 0
    data = trace_csv_bytes(trace)
    # one line per write so a failure reports how far we got
    for line in data.splitlines(keepends=True):
        try:
            n = destination.write(line)
        except OSError as exc:
            raise TraceWriteError(written, exc) from exc
        written += len(line) if n is None else n
    return written


def read_trace_csv(
    source: BinaryIO | bytes | str | os.PathLike,
    label: str,
    meta: Provenance | None = None,
) -> Trace:
    meta = meta or Provenance()
    if isinstance(source, (str, os.PathLike)):
        raw = Path(source).read_bytes()
    elif isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
    else:
        raw = source.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise TraceFormatError(1, f"not UTF-8: {exc}") from exc

    rows = list(csv.reader(io.StringIO(text, newline="")))
    if not rows or not rows[0] or rows[0][0] != "t":
        raise TraceFormatError(1, "header must start with 't'")
    events = tuple(rows[0][1:])
    if not events:
        raise TraceFormatError(1, "header names no events")
    samples = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(events) + 1:
            raise TraceFormatError(
                lineno, f"expected {len(events) + 1} fields, got {len(row)}"
            )
        try:
            values = [int(v) for v in row]
        except ValueError as exc:
            raise TraceFormatError(lineno, f"non-integer field ({exc})") from exc
        if values[0] != lineno - 2:
            raise TraceFormatError(lineno, f"time index {values[0]} out of sequence")
        if any(v < 0 for v in values[1:]):
            raise TraceInvariantError(f"line {lineno}: negative counter value")
        samples.append(values[1:])
    if not samples:
        raise TraceInvariantError("trace has no sample rows")
    return Trace(
        label=label,
        samples=np.array(samples, dtype=np.int64),
        events=events,
        sampling_rate_hz=meta.sampling_rate_hz,
        collected_at=meta.collected_at,
        source=meta.source,
    )


MANIFEST_NAME = "manifest.json"


def _safe_name(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in label)


def save_dataset(dataset: Dataset, directory: str | os.PathLike) -> Path:
    """Write every trace as CSV plus ``manifest.json``; returns the manifest path."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    counters: dict[str, int] = {}
    for trace in dataset.traces:
        n = counters.get(trace.label, 0)
        counters[trace.label] = n + 1
        rel = f"{_safe_name(trace.label)}/{n:04d}.csv"
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(trace_csv_bytes(trace))
        entries.append(
            {
                "label": trace.label,
                "path": rel,
                "source": trace.source,
                "sampling_rate_hz": trace.sampling_rate_hz,
                "collected_at": trace.collected_at,
            }
        )
    manifest = root / MANIFEST_NAME
    manifest.write_text(json.dumps(entries, indent=1) + "\n")
    return manifest


def load_dataset(path: str | os.PathLike, world: str | None = None) -> Dataset:
    """Load a dataset from a manifest file or a directory containing one."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    entries = json.loads(path.read_text())
    traces = []
    for entry in entries:
        meta = Provenance(
            sampling_rate_hz=entry.get("sampling_rate_hz", 1.0),
            collected_at=entry.get("collected_at", 0.0),
            source=entry.get("source", "replay"),
        )
        traces.append(read_trace_csv(path.parent / entry["path"], entry["label"], meta))
    labels = dict.fromkeys(t.label for t in traces)
    if world is None:
        world = "open" if NON_SENSITIVE in labels else "closed"
    return Dataset(tuple(traces), world)


# --------------------------------------------------------------------------
# splitting


def _train_counts(sizes: list[int], fraction: float) -> list[int]:
    # floor per class, then hand out the remainder one trace per class in
    # class order; every class keeps at least one trace on each side
    counts = [int(np.floor(fraction * n + 1e-9)) for n in sizes]
    remainder = int(round(fraction * sum(sizes))) - sum(counts)
    for i, n in enumerate(sizes):
        if remainder <= 0:
            break
        if counts[i] < n - 1:
            counts[i] += 1
            remainder -= 1
    return [min(max(c, 1), n - 1) for c, n in zip(counts, sizes)]


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Deterministic (stratified) percentage split into train and test."""
    if not len(dataset):
        raise SplitError("cannot split an empty dataset")
    rng = np.random.default_rng(spec.seed)
    train_idx: list[int] = []
    if spec.stratified:
        groups: dict[str, list[int]] = {c: [] for c in dataset.class_list}
        for i, t in enumerate(dataset.traces):
            groups[t.label].append(i)
        groups = {c: g for c, g in groups.items() if g}
        for c, g in groups.items():
            if len(g) < 2:
                raise SplitError(f"class {c!r} has a single trace; cannot stratify")
        counts = _train_counts([len(g) for g in groups.values()], spec.train_fraction)
        for g, k in zip(groups.values(), counts):
            perm = rng.permutation(len(g))
            train_idx.extend(g[j] for j in perm[:k])
    else:
        n = len(dataset)
        k = min(max(int(round(spec.train_fraction * n)), 1), n - 1) if n > 1 else 1
        train_idx = list(rng.permutation(n)[:k])
    chosen = set(int(i) for i in train_idx)
    train = [t for i, t in enumerate(dataset.traces) if i in chosen]
    test = [t for i, t in enumerate(dataset.traces) if i not in chosen]
    if not test:
        warnings.warn("split produced an empty test set")
    return dataset.with_traces(train), dataset.with_traces(test)
