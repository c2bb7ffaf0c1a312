"""Wall-time overhead of counter sampling on a CPU-bound victim process.

Falls back to software events when the host exposes no hardware PMU.

    python scripts/run_overhead.py --seconds 10 --rates 1 10 100 1000 10000
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

from leakedweb.collector import CounterGroup, CounterOpenError, run_overhead_bench
from leakedweb.core import DEFAULT_EVENTS

VICTIM = "s = 0\nfor i in range({n}):\n    s += i * i\n"


def victim_for(seconds: float) -> list[str]:
    n = 2_000_000
    t0 = time.perf_counter()
    subprocess.run([sys.executable, "-c", VICTIM.format(n=n)], check=True)
    per_iter = (time.perf_counter() - t0) / n
    return [sys.executable, "-c", VICTIM.format(n=int(seconds / per_iter))]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seconds", type=float, default=10.0)
    ap.add_argument("--rates", type=float, nargs="+", default=[1, 10, 100, 1000, 10000])
    ap.add_argument("--repetitions", type=int, default=5)
    ap.add_argument("--events", nargs="+", default=list(DEFAULT_EVENTS))
    args = ap.parse_args()

    events = tuple(args.events)
    try:
        CounterGroup(os.getpid(), events).close()
    except CounterOpenError as exc:
        print(f"{exc}; using {exc.fallback}", file=sys.stderr)
        events = tuple(exc.fallback)
    report = run_overhead_bench(victim_for(args.seconds), args.rates, args.repetitions, events)
    print(f"baseline {report.baseline_runtime_s:.3f}s")
    for rate, pct in zip(report.rates_hz, report.overhead_pct):
        print(f"{rate:>8g} Hz  {pct:+.2f}%")
    print(json.dumps(report.to_dict(), indent=1))


if __name__ == "__main__":
    main()
