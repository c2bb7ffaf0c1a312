"""Accuracy as training traces, ranked features and samples per trace shrink.

    python scripts/run_sweeps.py --repetitions 3 --format markdown --out sweeps.md
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from leakedweb.eval import AXES, SweepSpec, emit_report, mean_accuracy, run_sweep
from leakedweb.synth import benchmark_config

COORD = {"train_traces": "n_train_traces", "n_features": "n_features",
         "samples": "samples_per_trace"}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--families", nargs="+", default=["logit_boost"])
    ap.add_argument("--axes", nargs="+", default=list(AXES), choices=AXES)
    ap.add_argument("--repetitions", type=int, default=1)
    ap.add_argument("--open-world-extra", type=int, default=0)
    ap.add_argument("--open-world-mode", choices=("split", "test_only"), default="split")
    ap.add_argument("--format", choices=("json", "csv", "markdown"), default="markdown")
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    spec = SweepSpec(families=tuple(args.families), axes=tuple(args.axes),
                     repetitions=args.repetitions, open_world_mode=args.open_world_mode,
                     world="open" if args.open_world_extra else "closed")
    reports = run_sweep(benchmark_config(open_world_extra=args.open_world_extra), spec)
    for axis in spec.axes:
        curve = mean_accuracy(reports, axis, COORD[axis])
        print(f"{axis:13s} " + "  ".join(f"{k}:{v:.3f}" for k, v in curve.items()),
              file=sys.stderr)
    data = emit_report(reports, args.format)
    if args.out:
        args.out.write_bytes(data)
    else:
        sys.stdout.buffer.write(data)


if __name__ == "__main__":
    main()
