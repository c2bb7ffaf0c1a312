"""Live per-process counter sampling on Linux through ``perf_event_open``.

A scanner polls ``/proc`` once per tick for browser processes; every new
match gets its own sampler thread that attaches one counter group (leader
plus siblings, inherited by child threads) and emits one row of counter
deltas per sampling interval. Multiplexed counters are scaled by
``time_enabled / time_running`` over each interval.
"""
from __future__ import annotations

import ctypes
import os
import platform
import queue
import shlex
import statistics
import struct
import subprocess
import sys
import threading
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DEFAULT_EVENTS, LeakedWebError, Provenance, Trace, read_trace_csv

PARANOID_PATH = "/proc/sys/kernel/perf_event_paranoid"
MAX_RATE_HZ = 1e6
LIVENESS_POLL_S = 0.05

# perf_event_attr.type
PERF_TYPE_HARDWARE = 0
PERF_TYPE_SOFTWARE = 1
PERF_TYPE_HW_CACHE = 3

PERF_FORMAT_TOTAL_TIME_ENABLED = 1 << 0
PERF_FORMAT_TOTAL_TIME_RUNNING = 1 << 1

_FLAG_DISABLED = 1 << 0
_FLAG_INHERIT = 1 << 1
_FLAG_EXCLUDE_HV = 1 << 6

PERF_EVENT_IOC_ENABLE = 0x2400
PERF_EVENT_IOC_DISABLE = 0x2401
PERF_IOC_FLAG_GROUP = 1

_SYSCALL_NR = {"x86_64": 298, "aarch64": 241, "i386": 336, "i686": 336, "armv7l": 364}

_CACHE = {"L1-dcache": 0, "L1-icache": 1, "LLC": 2, "dTLB": 3, "iTLB": 4, "branch": 5, "node": 6}
_OP = {"loads": 0, "stores": 1, "prefetches": 2}
_RESULT = {"": 0, "misses": 1}


def _cache(cache: str, op: str, result: str = "") -> tuple[int, int]:
    return PERF_TYPE_HW_CACHE, _CACHE[cache] | (_OP[op] << 8) | (_RESULT[result] << 16)


# Event names follow the perf tool's spelling.
EVENT_CODES: dict[str, tuple[int, int]] = {
    "cpu-cycles": (PERF_TYPE_HARDWARE, 0),
    "instructions": (PERF_TYPE_HARDWARE, 1),
    "cache-references": (PERF_TYPE_HARDWARE, 2),
    "cache-misses": (PERF_TYPE_HARDWARE, 3),
    "branch-instructions": (PERF_TYPE_HARDWARE, 4),
    "branch-misses": (PERF_TYPE_HARDWARE, 5),
    "L1-dcache-load-misses": _cache("L1-dcache", "loads", "misses"),
    "L1-dcache-stores": _cache("L1-dcache", "stores"),
    "L1-icache-load-misses": _cache("L1-icache", "loads", "misses"),
    "LLC-store-misses": _cache("LLC", "stores", "misses"),
    "dTLB-load-misses": _cache("dTLB", "loads", "misses"),
    "dTLB-stores": _cache("dTLB", "stores"),
    "dTLB-store-misses": _cache("dTLB", "stores", "misses"),
    "iTLB-loads": _cache("iTLB", "loads"),
    "iTLB-load-misses": _cache("iTLB", "loads", "misses"),
    "branch-loads": _cache("branch", "loads"),
    "branch-load-misses": _cache("branch", "loads", "misses"),
    "node-loads": _cache("node", "loads"),
    "node-stores": _cache("node", "stores"),
    "cpu-clock": (PERF_TYPE_SOFTWARE, 0),
    "task-clock": (PERF_TYPE_SOFTWARE, 1),
    "page-faults": (PERF_TYPE_SOFTWARE, 2),
    "context-switches": (PERF_TYPE_SOFTWARE, 3),
    "cpu-migrations": (PERF_TYPE_SOFTWARE, 4),
    "minor-faults": (PERF_TYPE_SOFTWARE, 5),
    "major-faults": (PERF_TYPE_SOFTWARE, 6),
}
SOFTWARE_EVENTS = ("task-clock", "context-switches", "page-faults", "cpu-clock",
                   "minor-faults", "cpu-migrations", "major-faults")


class CollectorError(LeakedWebError):
    pass


class UnsupportedPlatform(CollectorError):
    pass


class ParanoidLevelError(CollectorError):
    pass


class CounterOpenError(CollectorError):
    """Some events could not be opened. ``fallback`` lists software events
    that can stand in on hosts without a usable PMU."""

    def __init__(self, failed: dict[str, str]):
        self.failed = failed
        self.fallback = SOFTWARE_EVENTS[: len(failed)] if failed else ()
        detail = ", ".join(f"{e} ({why})" for e, why in failed.items())
        super().__init__(
            f"cannot open counters: {detail}; software fallback: {', '.join(self.fallback)}"
        )


class BenchmarkError(CollectorError):
    pass


@dataclass(frozen=True)
class MonitorConfig:
    target_process_names: tuple[str, ...] = ("firefox",)
    events: tuple[str, ...] = DEFAULT_EVENTS
    sampling_rate_hz: float = 1.0
    max_duration_s: int = 60
    scan_interval_s: int = 1

    def __post_init__(self):
        object.__setattr__(self, "target_process_names", tuple(self.target_process_names))
        object.__setattr__(self, "events", tuple(self.events))
        if not self.events:
            raise ValueError("at least one event is required")
        if not 0 < self.sampling_rate_hz <= MAX_RATE_HZ:
            raise ValueError(f"sampling rate must lie in (0, {MAX_RATE_HZ:g}] Hz")
        if self.max_duration_s < 1:
            raise ValueError("max_duration_s must be >= 1")
        unknown = [e for e in self.events if e not in EVENT_CODES]
        if unknown:
            raise ValueError(f"unknown events: {', '.join(unknown)}")


# ------------------------------------------------------------------ platform


def check_paranoid_level(path: str | None = None) -> int:
    path = path or PARANOID_PATH
    if not sys.platform.startswith("linux") or not os.path.exists(path):
        raise UnsupportedPlatform(f"{path} not available; live collection needs Linux")
    return int(Path(path).read_text().strip())


def require_collection_allowed(path: str | None = None) -> int:
    level = check_paranoid_level(path)
    if level >= 4:
        raise ParanoidLevelError(f"perf_event_paranoid={level} forbids counter access")
    return level


def _comm(pid: int) -> str | None:
    try:
        return Path(f"/proc/{pid}/comm").read_text().strip()
    except OSError:
        return None


def scan_processes(config: MonitorConfig) -> list[tuple[int, str]]:
    """Live pids whose command name matches a target, ascending; never our own."""
    me = os.getpid()
    targets = set(config.target_process_names)
    found = []
    for entry in os.listdir("/proc"):
        if not entry.isdigit():
            continue
        pid = int(entry)
        if pid == me:
            continue
        name = _comm(pid)
        if name is not None and name in targets and _alive(pid):
            found.append((pid, name))
    return sorted(found)


def _alive(pid: int) -> bool:
    try:
        stat = Path(f"/proc/{pid}/stat").read_text()
    except OSError:
        return False
    # state field follows the parenthesised command name
    state = stat[stat.rfind(")") + 2 :].split(" ", 1)[0]
    return state not in ("Z", "X")


# ------------------------------------------------------------ perf_event_open


class _PerfEventAttr(ctypes.Structure):
    # PERF_ATTR_SIZE_VER0 layout; bitfield flags packed into one u64
    _fields_ = [
        ("type", ctypes.c_uint32),
        ("size", ctypes.c_uint32),
        ("config", ctypes.c_uint64),
        ("sample_period", ctypes.c_uint64),
        ("sample_type", ctypes.c_uint64),
        ("read_format", ctypes.c_uint64),
        ("flags", ctypes.c_uint64),
        ("wakeup_events", ctypes.c_uint32),
        ("bp_type", ctypes.c_uint32),
        ("config1", ctypes.c_uint64),
        ("config2", ctypes.c_uint64),
    ]


_libc = None


def _perf_event_open(attr: _PerfEventAttr, pid: int, cpu: int, group_fd: int) -> int:
    global _libc
    nr = _SYSCALL_NR.get(platform.machine())
    if nr is None:
        raise UnsupportedPlatform(f"no perf_event_open syscall number for {platform.machine()}")
    if _libc is None:
        _libc = ctypes.CDLL(None, use_errno=True)
    fd = _libc.syscall(nr, ctypes.byref(attr), pid, cpu, group_fd, 0)
    if fd < 0:
        err = ctypes.get_errno()
        raise OSError(err, os.strerror(err))
    return fd


def _ioctl(fd: int, request: int, arg: int) -> None:
    import fcntl

    fcntl.ioctl(fd, request, arg)


class CounterGroup:
    """One leader plus siblings attached to ``pid`` (all its threads)."""

    def __init__(self, pid: int, events: Sequence[str]):
        self.events = tuple(events)
        self.fds: list[int] = []
        failed: dict[str, str] = {}
        for name in self.events:
            typ, config = EVENT_CODES[name]
            attr = _PerfEventAttr(
                type=typ,
                size=ctypes.sizeof(_PerfEventAttr),
                config=config,
                read_format=PERF_FORMAT_TOTAL_TIME_ENABLED | PERF_FORMAT_TOTAL_TIME_RUNNING,
                flags=_FLAG_INHERIT | _FLAG_EXCLUDE_HV | (_FLAG_DISABLED if not self.fds else 0),
            )
            leader = self.fds[0] if self.fds else -1
            try:
                self.fds.append(_perf_event_open(attr, pid, -1, leader))
            except OSError as exc:
                failed[name] = exc.strerror or str(exc)
        if failed:
            self.close()
            raise CounterOpenError(failed)
        _ioctl(self.fds[0], PERF_EVENT_IOC_ENABLE, PERF_IOC_FLAG_GROUP)

    def read(self) -> np.ndarray:
        """Cumulative ``(value, time_enabled, time_running)`` per event."""
        out = np.empty((len(self.fds), 3), dtype=np.int64)
        for i, fd in enumerate(self.fds):
            out[i] = struct.unpack("QQQ", os.read(fd, 24))
        return out

    def close(self) -> None:
        for fd in reversed(self.fds):
            try:
                os.close(fd)
            except OSError:
                pass
        self.fds = []


def scaled_deltas(prev: np.ndarray, cur: np.ndarray) -> np.ndarray:
    """Counter increments over one interval, scaled for multiplexing."""
    d = cur - prev
    value, enabled, running = d[:, 0], d[:, 1], d[:, 2]
    scaled = np.where(running > 0, value * (enabled / np.maximum(running, 1)), value)
    return np.maximum(0, np.round(scaled)).astype(np.int64)


# ----------------------------------------------------------------- handles


class TraceHandle:
    """A running (or finished) collection whose result is one Trace."""

    label: str

    def stop(self) -> Trace:
        raise NotImplementedError

    def wait(self, timeout: float | None = None) -> Trace:
        raise NotImplementedError

    @property
    def done(self) -> bool:
        raise NotImplementedError


class MonitorHandle(TraceHandle):
    def __init__(self, pid: int, config: MonitorConfig, label: str = "unlabelled",
                 on_row: Callable[[np.ndarray], None] | None = None):
        self.pid = pid
        self.config = config
        self.label = label
        self.rows: list[np.ndarray] = []
        self.started_at = time.time()
        self._stop = threading.Event()
        self._finished = threading.Event()
        self._error: BaseException | None = None
        self._on_row = on_row
        self.cpu_time_s = 0.0
        self._group = CounterGroup(pid, config.events)
        self._thread = threading.Thread(target=self._run, name=f"sampler-{pid}", daemon=True)
        self._thread.start()

    def _run(self):
        cpu0 = time.thread_time()
        period = 1.0 / self.config.sampling_rate_hz
        max_rows = int(round(self.config.max_duration_s * self.config.sampling_rate_hz))
        try:
            prev = self._group.read()
            start = time.monotonic()
            next_check = start + LIVENESS_POLL_S
            tick = 1
            exited = False
            while len(self.rows) < max_rows and not exited:
                # absolute deadlines keep the tick grid from drifting
                deadline = start + tick * period
                while not self._stop.is_set():
                    now = time.monotonic()
                    if now >= next_check:
                        next_check = now + LIVENESS_POLL_S
                        if not _alive(self.pid):
                            exited = True
                            break
                    if now >= deadline:
                        break
                    self._stop.wait(min(deadline, next_check) - now)
                if self._stop.is_set():
                    break
                if exited:
                    # keep the last partial interval if it spans half a period
                    if time.monotonic() - (deadline - period) < 0.5 * period:
                        break
                self._emit(scaled_deltas(prev, cur := self._group.read()))
                prev = cur
                tick += 1
        except BaseException as exc:  # surfaced by wait()
            self._error = exc
        finally:
            self._group.close()
            self.cpu_time_s = time.thread_time() - cpu0
            self._finished.set()

    def _emit(self, row: np.ndarray) -> None:
        self.rows.append(row)
        if self._on_row is not None:
            self._on_row(row)

    @property
    def done(self) -> bool:
        return self._finished.is_set()

    def _trace(self) -> Trace:
        if self._error is not None:
            raise CollectorError(f"sampler for pid {self.pid} failed: {self._error}")
        if not self.rows:
            raise CollectorError(f"pid {self.pid} produced no complete sample")
        return Trace(
            label=self.label,
            samples=np.vstack(self.rows),
            events=self.config.events,
            sampling_rate_hz=self.config.sampling_rate_hz,
            collected_at=self.started_at,
            source="live",
        )

    def wait(self, timeout: float | None = None) -> Trace:
        if not self._finished.wait(timeout):
            raise TimeoutError(f"monitor of pid {self.pid} still running")
        return self._trace()

    def stop(self) -> Trace:
        self._stop.set()
        self._finished.wait()
        return self._trace()


def start_monitor(pid: int, config: MonitorConfig, label: str = "unlabelled") -> MonitorHandle:
    require_collection_allowed()
    if not _alive(pid):
        raise CollectorError(f"pid {pid} is not running")
    return MonitorHandle(pid, config, label)


class ReplayHandle(TraceHandle):
    """Serves a recorded CSV trace through the same handle contract."""

    def __init__(self, path: str | os.PathLike, label: str, sampling_rate_hz: float = 1.0):
        self.label = label
        self._trace = read_trace_csv(path, label, Provenance(sampling_rate_hz, 0.0, "replay"))

    @property
    def done(self) -> bool:
        return True

    def wait(self, timeout: float | None = None) -> Trace:
        return self._trace

    def stop(self) -> Trace:
        return self._trace


# ----------------------------------------------------------------- scanning


class Watcher:
    """Scanner loop: attaches a sampler to every new matching pid and puts
    finished traces on ``self.traces`` (single consumer)."""

    def __init__(self, config: MonitorConfig, label: str = "unlabelled"):
        self.config = config
        self.label = label
        self.traces: queue.Queue[tuple[int, Trace]] = queue.Queue()
        self.errors: list[str] = []
        self._handles: dict[int, MonitorHandle] = {}
        self._seen: set[int] = set()

    def poll(self) -> None:
        for pid, _name in scan_processes(self.config):
            if pid in self._seen:
                continue
            self._seen.add(pid)
            try:
                self._handles[pid] = MonitorHandle(pid, self.config, self.label)
            except CollectorError as exc:
                self.errors.append(f"pid {pid}: {exc}")
                if isinstance(exc, CounterOpenError):
                    raise
        for pid, handle in list(self._handles.items()):
            if handle.done:
                del self._handles[pid]
                self._deliver(pid, handle)

    def _deliver(self, pid, handle):
        try:
            self.traces.put((pid, handle.wait(0)))
        except CollectorError as exc:
            self.errors.append(str(exc))

    def run(self, duration_s: float) -> None:
        require_collection_allowed()
        end = time.monotonic() + duration_s
        while time.monotonic() < end:
            self.poll()
            time.sleep(self.config.scan_interval_s)
        self.close()

    def close(self) -> None:
        for pid, handle in list(self._handles.items()):
            handle._stop.set()
            handle._finished.wait()
            self._deliver(pid, handle)
        self._handles.clear()


# ------------------------------------------------------------- overhead bench


@dataclass(frozen=True)
class OverheadReport:
    """Victim slowdown per sampling rate.

    ``overhead_pct`` is the median over repetitions of each monitored run's
    wall time divided by the baseline run of the same repetition.
    ``baseline_spread_pct`` (median absolute deviation of the baselines) is
    the noise floor to read it against; ``sampler_cpu_pct`` is the sampler
    thread's own CPU time as a share of the victim's wall time.
    """

    rates_hz: tuple[float, ...]
    victim_runtime_s: tuple[float, ...]
    baseline_runtime_s: float
    overhead_pct: tuple[float, ...]
    repetitions: int
    events: tuple[str, ...] = ()
    baseline_spread_pct: float = 0.0
    sampler_cpu_pct: tuple[float, ...] = ()
    samples: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rates_hz": list(self.rates_hz),
            "victim_runtime_s": list(self.victim_runtime_s),
            "baseline_runtime_s": self.baseline_runtime_s,
            "overhead_pct": list(self.overhead_pct),
            "baseline_spread_pct": self.baseline_spread_pct,
            "sampler_cpu_pct": list(self.sampler_cpu_pct),
            "repetitions": self.repetitions,
            "events": list(self.events),
            "samples": self.samples,
        }


def _run_victim(argv: Sequence[str], config: MonitorConfig | None) -> tuple[float, float]:
    """Wall time of one victim run and the CPU time its sampler used."""
    t0 = time.perf_counter()
    proc = subprocess.Popen(argv, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    handle = None
    if config is not None:
        try:
            handle = MonitorHandle(proc.pid, config)
        except CounterOpenError:
            proc.kill()
            proc.wait()
            raise
    code = proc.wait()
    elapsed = time.perf_counter() - t0
    sampler_cpu = 0.0
    if handle is not None:
        handle._stop.set()
        handle._finished.wait()
        sampler_cpu = handle.cpu_time_s
    if code != 0:
        raise BenchmarkError(f"victim exited with status {code}")
    return elapsed, sampler_cpu


def run_overhead_bench(
    victim_command: str | Sequence[str],
    rates_hz: Sequence[float],
    repetitions: int = 5,
    events: Sequence[str] = DEFAULT_EVENTS,
) -> OverheadReport:
    """Time the victim unmonitored, then monitored at each rate.

    Runs are interleaved (baseline, rate1, rate2, ... per repetition) and
    each monitored run is compared with its own repetition's baseline, so
    slow drifts of the host cancel out of the ratio.
    """
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    argv = shlex.split(victim_command) if isinstance(victim_command, str) else list(victim_command)
    if rates_hz:
        require_collection_allowed()
    configs = [
        MonitorConfig(target_process_names=(), events=tuple(events),
                      sampling_rate_hz=r, max_duration_s=24 * 3600)
        for r in rates_hz
    ]
    base: list[float] = []
    per_rate: list[list[float]] = [[] for _ in rates_hz]
    cpu: list[list[float]] = [[] for _ in rates_hz]
    for _ in range(repetitions):
        base.append(_run_victim(argv, None)[0])
        for k, cfg in enumerate(configs):
            wall, used = _run_victim(argv, cfg)
            per_rate[k].append(wall)
            cpu[k].append(used / wall)
    baseline = statistics.median(base)
    spread = statistics.median(abs(b - baseline) for b in base) / baseline * 100.0
    return OverheadReport(
        rates_hz=tuple(float(r) for r in rates_hz),
        victim_runtime_s=tuple(statistics.median(v) for v in per_rate),
        baseline_runtime_s=baseline,
        overhead_pct=tuple(
            (statistics.median(m / b for m, b in zip(v, base)) - 1.0) * 100.0 for v in per_rate
        ),
        repetitions=repetitions,
        events=tuple(events),
        baseline_spread_pct=spread,
        sampler_cpu_pct=tuple(statistics.fmean(c) * 100.0 for c in cpu),
        samples={"baseline": base, "per_rate": per_rate},
    )
