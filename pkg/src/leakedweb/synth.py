"""Synthetic per-website HPC traces and brute-force reference oracles.

A site is modelled by per-event base rates, a linear drift, and a list of
multiplicative bursts (page-load phases). Each sample is

    max(0, round((base + trend * t) * burst(t) * (1 + N(0, noise_cv))))

Randomness comes from numpy's PCG64 seeded with ``[seed, site, trace]`` so
any single trace can be regenerated without replaying the others.
"""
from __future__ import annotations

import json
import math
import os
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import EVENTS, NON_SENSITIVE, Dataset, Trace


@dataclass(frozen=True)
class Burst:
    start_s: float
    length_s: float
    multiplier: dict[str, float]


@dataclass(frozen=True)
class SiteSignature:
    label: str
    base_rates: dict[str, float]
    trend: dict[str, float] = field(default_factory=dict)
    burst_profile: tuple[Burst, ...] = ()
    noise_cv: float = 0.0

    def __post_init__(self):
        if not self.base_rates:
            raise ValueError("signature needs at least one event")
        if any(not r > 0 for r in self.base_rates.values()):
            raise ValueError(f"{self.label}: base rates must be positive")
        if not 0 <= self.noise_cv < 1:
            raise ValueError(f"{self.label}: noise_cv must lie in [0, 1)")
        bursts = tuple(
            b if isinstance(b, Burst) else Burst(**b) for b in self.burst_profile
        )
        for b in bursts:
            if not (0 <= b.start_s < 3600 and 0 <= b.start_s + b.length_s <= 3600):
                raise ValueError(f"{self.label}: burst window outside [0, 3600)")
        object.__setattr__(self, "burst_profile", bursts)

    @property
    def events(self) -> tuple[str, ...]:
        return tuple(self.base_rates)

    def mean_curve(self, events: Sequence[str], n_samples: int) -> np.ndarray:
        """Noise-free expected counts, shape ``(n_samples, len(events))``."""
        t = np.arange(n_samples, dtype=float)[:, None]
        base = np.array([self.base_rates[e] for e in events])
        trend = np.array([self.trend.get(e, 0.0) for e in events])
        mult = np.ones((n_samples, len(events)))
        for b in self.burst_profile:
            inside = (t[:, 0] >= b.start_s) & (t[:, 0] < b.start_s + b.length_s)
            m = np.array([b.multiplier.get(e, 1.0) for e in events])
            mult[inside] *= m
        return (base + trend * t) * mult


@dataclass(frozen=True)
class GeneratorConfig:
    signatures: tuple[SiteSignature, ...]
    n_traces_per_site: int = 70
    samples_per_trace: int = 60
    seed: int = 0
    open_world_extra: int = 0
    # template used to draw the unique non-sensitive sites
    extra_sampler: SignatureSampler | None = None

    def __post_init__(self):
        object.__setattr__(self, "signatures", tuple(self.signatures))
        if not self.signatures:
            raise ValueError("config needs at least one signature")
        if self.n_traces_per_site < 1 or self.samples_per_trace < 1:
            raise ValueError("n_traces_per_site and samples_per_trace must be >= 1")
        events = self.signatures[0].events
        if any(s.events != events for s in self.signatures):
            raise ValueError("all signatures must cover the same events")

    @property
    def events(self) -> tuple[str, ...]:
        return self.signatures[0].events


def _trace_rng(seed: int, site: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, site, index])


def generate_trace(
    sig: SiteSignature,
    n_samples: int,
    rng: np.random.Generator,
    label: str | None = None,
) -> Trace:
    events = sig.events
    mean = sig.mean_curve(events, n_samples)
    noise = rng.standard_normal(mean.shape) * sig.noise_cv
    values = np.maximum(0, np.round(mean * (1 + noise)))
    return Trace(
        label=sig.label if label is None else label,
        samples=values.astype(np.int64),
        events=events,
        source="synthetic",
    )


def generate(config: GeneratorConfig) -> Dataset:
    """Build a dataset: ``n_traces_per_site`` traces per signature, plus one
    trace per extra unique non-sensitive site when ``open_world_extra > 0``."""
    traces = []
    for s, sig in enumerate(config.signatures):
        for i in range(config.n_traces_per_site):
            rng = _trace_rng(config.seed, s, i)
            traces.append(generate_trace(sig, config.samples_per_trace, rng))
    if config.open_world_extra == 0:
        return Dataset(tuple(traces), "closed")

    sampler = (config.extra_sampler or SignatureSampler(events=config.events)).unstructured()
    extras = sampler.sample(
        config.open_world_extra, seed=config.seed + 1, prefix="unmonitored"
    )
    offset = len(config.signatures)
    for j, sig in enumerate(extras):
        rng = _trace_rng(config.seed, offset + j, 0)
        traces.append(
            generate_trace(sig, config.samples_per_trace, rng, label=NON_SENSITIVE)
        )
    classes = tuple(sig.label for sig in config.signatures) + (NON_SENSITIVE,)
    return Dataset(tuple(traces), "open", classes)


@dataclass(frozen=True)
class SignatureSampler:
    """Random website signatures with log-uniformly spread rates.

    ``spread[k]`` is the half-width, in natural-log units, of the range the
    base rate and the burst multiplier of event ``k`` are drawn from; a wider
    spread makes the event more site-specific. Each site gets one load burst
    at the start of the visit, ``burst_length_s`` long (uniform range).
    """

    events: tuple[str, ...] = tuple(e.name for e in EVENTS[:4])
    center: float = 1e5
    spread: tuple[float, ...] | None = None
    burst_length_s: tuple[float, float] = (10.0, 14.0)
    burst_multiplier: float = 5.0
    trend_fraction: float = 0.002
    noise_cv: float = 0.25
    # optional grid over the leading events: levels per event, log step
    lattice: tuple[int, ...] = ()
    lattice_step: float = 0.4

    def spreads(self) -> np.ndarray:
        if self.spread is not None:
            return np.asarray(self.spread, dtype=float)
        return np.full(len(self.events), 1.0)

    def sample(self, n: int, seed: int, prefix: str = "site") -> list[SiteSignature]:
        rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0x51735])
        spreads = self.spreads()
        k = len(self.events)
        out = []
        cells = self._lattice_cells(n, rng)
        for i in range(n):
            offset = spreads * rng.uniform(-1.0, 1.0, k)
            if cells is not None:
                offset[: len(self.lattice)] += cells[i]
            base = self.center * np.exp(offset)
            trend = base * self.trend_fraction * rng.uniform(-1.0, 1.0, k)
            length = float(np.round(rng.uniform(*self.burst_length_s)))
            mult = self.burst_multiplier * np.exp(spreads * rng.uniform(-1.0, 1.0, k))
            out.append(
                SiteSignature(
                    label=f"{prefix}-{i:03d}.example",
                    base_rates={e: float(v) for e, v in zip(self.events, base)},
                    trend={e: float(v) for e, v in zip(self.events, trend)},
                    burst_profile=(
                        Burst(0.0, length, {e: float(m) for e, m in zip(self.events, mult)}),
                    ),
                    noise_cv=self.noise_cv,
                )
            )
        return out

    def _lattice_cells(self, n: int, rng: np.random.Generator):
        if not self.lattice:
            return None
        levels = np.asarray(self.lattice)
        if n > levels.prod():
            raise ValueError(f"lattice {self.lattice} has fewer than {n} cells")
        picks = rng.permutation(int(levels.prod()))[:n]
        coords = np.stack(np.unravel_index(picks, self.lattice), axis=1)
        return (coords - (levels - 1) / 2.0) * self.lattice_step

    def unstructured(self) -> SignatureSampler:
        """Same rate range without the lattice, for unmonitored sites."""
        if not self.lattice:
            return self
        spread = self.spreads().copy()
        for j, lv in enumerate(self.lattice):
            spread[j] += (lv - 1) / 2.0 * self.lattice_step
        return replace(self, spread=tuple(spread), lattice=())


# Fixed desk-scale benchmark: 30 sites over the eight top-ranked events, 70
# traces of 60 one-second samples each. Sites sit on a jittered 6x5 lattice
# in log-rate space of the two leading events; events 3-4 carry a little
# extra signal and events 5-8 almost none.
BENCHMARK_SEED = 20210607
BENCHMARK_EVENTS = tuple(e.name for e in EVENTS[:8])
BENCHMARK_SAMPLER = SignatureSampler(
    events=BENCHMARK_EVENTS,
    spread=(0.03, 0.03, 0.15, 0.15, 0.05, 0.05, 0.05, 0.05),
    lattice=(6, 5),
    lattice_step=0.42,
    noise_cv=0.25,
)


def benchmark_config(
    n_sites: int = 30,
    n_traces_per_site: int = 70,
    samples_per_trace: int = 60,
    open_world_extra: int = 0,
    seed: int = BENCHMARK_SEED,
) -> GeneratorConfig:
    sigs = BENCHMARK_SAMPLER.sample(n_sites, seed=BENCHMARK_SEED, prefix="site")
    return GeneratorConfig(
        signatures=tuple(sigs),
        n_traces_per_site=n_traces_per_site,
        samples_per_trace=samples_per_trace,
        seed=seed,
        open_world_extra=open_world_extra,
        extra_sampler=BENCHMARK_SAMPLER,
    )


# --------------------------------------------------------------------------
# signature files


def signature_to_dict(sig: SiteSignature) -> dict:
    d = asdict(sig)
    d["burst_profile"] = [asdict(b) for b in sig.burst_profile]
    return d


def save_signatures(sigs: Sequence[SiteSignature], path: str | os.PathLike) -> None:
    Path(path).write_text(
        json.dumps([signature_to_dict(s) for s in sigs], indent=1) + "\n"
    )


def load_signatures(path: str | os.PathLike) -> list[SiteSignature]:
    return [
        SiteSignature(
            label=d["label"],
            base_rates=d["base_rates"],
            trend=d.get("trend", {}),
            burst_profile=tuple(Burst(**b) for b in d.get("burst_profile", [])),
            noise_cv=d.get("noise_cv", 0.0),
        )
        for d in json.loads(Path(path).read_text())
    ]


# --------------------------------------------------------------------------
# oracles: deliberately naive, used only to check the fast paths


def oracle_dtw(a: Sequence[float], b: Sequence[float]) -> float:
    """Unconstrained DTW with |x - y| local cost, full O(nm) table."""
    a, b = list(a), list(b)
    if not a or not b:
        raise ValueError("DTW needs non-empty sequences")
    inf = float("inf")
    D = [[inf] * (len(b) + 1) for _ in range(len(a) + 1)]
    D[0][0] = 0.0
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            cost = abs(a[i - 1] - b[j - 1])
            D[i][j] = cost + min(D[i - 1][j], D[i][j - 1], D[i - 1][j - 1])
    return D[len(a)][len(b)]


class UndefinedCorrelation(ValueError):
    pass


def oracle_pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Two-pass population Pearson coefficient."""
    x, y = [float(v) for v in x], [float(v) for v in y]
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("need two equal-length sequences of length >= 2")
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y)) / n
    vx = sum((a - mx) ** 2 for a in x) / n
    vy = sum((b - my) ** 2 for b in y) / n
    if vx == 0 or vy == 0:
        raise UndefinedCorrelation("zero variance: correlation undefined")
    r = cov / math.sqrt(vx * vy)
    return max(-1.0, min(1.0, r))
