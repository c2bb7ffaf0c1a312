"""``leakedweb`` command line: one binary, one subcommand per pipeline stage.

Exit status is 0 on success, 1 on a domain error and 2 on a usage error.
Every subcommand accepts ``--config FILE`` (a JSON object whose keys are the
subcommand's long option names, with dashes or underscores); flags given on
the command line win over the file. ``--seed`` falls back to the
``LEAKEDWEB_SEED`` environment variable, then to 0.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from collections.abc import Sequence
from pathlib import Path

from .core import (
    DEFAULT_TRAIN_FRACTION,
    MANIFEST_NAME,
    Dataset,
    LeakedWebError,
    Provenance,
    SplitSpec,
    load_dataset,
    read_trace_csv,
    save_dataset,
    split,
)

log = logging.getLogger("leakedweb")

SUBCOMMANDS = ("collect", "synth", "rank", "train", "predict", "eval", "sweep",
               "serve", "send", "bench")
SEED_ENV = "LEAKEDWEB_SEED"
# options that belong to the parser machinery, not to a config file
_NOT_CONFIGURABLE = {"command", "config", "help", "func"}


class UsageError(Exception):
    pass


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in _csv_list(text))


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(s) for s in _csv_list(text))


def _json_obj(text: str) -> dict:
    value = json.loads(text)
    if not isinstance(value, dict):
        raise argparse.ArgumentTypeError("expected a JSON object")
    return value


# ------------------------------------------------------------------ helpers


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    return 0


def _require(args, *names: str) -> None:
    missing = ["--" + n.replace("_", "-") for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"the following arguments are required: {', '.join(missing)}")


def _select_split(args, dataset: Dataset) -> Dataset:
    if args.split == "all":
        return dataset
    train, test = split(dataset, SplitSpec(args.train_fraction, args.seed))
    return train if args.split == "train" else test


def _write(path: str | None, data: bytes) -> None:
    if path in (None, "-"):
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
        return
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(data)
    log.info("wrote %s", out)


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode()


# -------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    from .synth import (
        GeneratorConfig,
        benchmark_config,
        generate,
        load_signatures,
        save_signatures,
    )

    _require(args, "out")
    if args.signatures:
        base = GeneratorConfig(tuple(load_signatures(args.signatures)))
        config = GeneratorConfig(base.signatures, args.traces, args.samples, args.seed,
                                 args.open_world_extra)
    else:
        config = benchmark_config(args.sites, args.traces, args.samples,
                                  args.open_world_extra, seed=args.seed)
    if args.write_signatures:
        save_signatures(config.signatures, args.write_signatures)
    dataset = generate(config)
    manifest = save_dataset(dataset, args.out)
    log.info("generated %d traces over %d classes into %s", len(dataset),
             len(dataset.class_list), manifest.parent)
    return 0


def cmd_rank(args) -> int:
    from .features import rank_features

    _require(args, "dataset")
    dataset = _select_split(args, load_dataset(args.dataset))
    ranking = rank_features(dataset, args.policy)
    _write(args.out, ranking.to_json().encode())
    return 0


def _train_events(args) -> tuple[str, ...] | None:
    from .features import FeatureRanking

    if args.events:
        return args.events
    if args.ranking:
        return FeatureRanking.load(args.ranking).top_k(args.top_k)
    return None


def cmd_train(args) -> int:
    from dataclasses import fields

    from .learners.model import PARAMS, family_name, train

    _require(args, "family", "dataset", "out")
    family = family_name(args.family)
    params = dict(args.params or {})
    if "seed" in {f.name for f in fields(PARAMS[family])}:
        params.setdefault("seed", args.seed)
    dataset = _select_split(args, load_dataset(args.dataset))
    events = _train_events(args)
    if events is None and args.top_k is not None:
        from .features import rank_features

        events = rank_features(dataset).top_k(args.top_k)
    model = train(family, dataset, params, events=events)
    _write(args.out, model.to_json())
    return 0


def cmd_predict(args) -> int:
    from .learners import TrainedModel, predict

    _require(args, "model", "trace")
    model = TrainedModel.load(args.model)
    trace = read_trace_csv(args.trace, args.label, Provenance(args.rate, 0.0, "replay"))
    result = predict(model, trace)
    _write(args.out, _json_bytes({"label": result.label, "scores": result.scores}))
    return 0


def cmd_eval(args) -> int:
    from .eval import emit_report, evaluate
    from .learners import TrainedModel

    _require(args, "model", "dataset")
    model = TrainedModel.load(args.model)
    dataset = _select_split(args, load_dataset(args.dataset))
    report = evaluate(model, dataset, {"family": model.family, "split": args.split},
                      allow_unknown=args.allow_unknown)
    _write(args.out, emit_report([report], args.format))
    log.info("accuracy %.4f weighted F %.4f", report.accuracy, report.weighted_f)
    return 0


def cmd_sweep(args) -> int:
    from .eval import SweepSpec, emit_report, run_sweep
    from .synth import benchmark_config

    spec_kwargs = dict(
        families=args.families, axes=args.axes, repetitions=args.repetitions,
        seed=args.seed, train_fraction=args.train_fraction,
        family_params=args.family_params or {}, open_world_mode=args.open_world_mode,
        base_train_traces=args.base_train_traces, base_features=args.base_features,
        base_samples=args.base_samples,
    )
    for name in ("train_traces_grid", "feature_count_grid", "samples_grid"):
        if getattr(args, name) is not None:
            spec_kwargs[name] = getattr(args, name)
    if args.dataset:
        source = load_dataset(args.dataset)
    else:
        source = benchmark_config(args.sites, args.traces, args.samples,
                                  args.open_world_extra, seed=args.seed)
    world = "open" if (
        isinstance(source, Dataset) and source.world == "open"
        or not isinstance(source, Dataset) and source.open_world_extra
    ) else "closed"
    reports = run_sweep(source, SweepSpec(world=world, **spec_kwargs))
    _write(args.out, emit_report(reports, args.format))
    return 0


def cmd_collect(args) -> int:
    from .collector import MonitorConfig, ReplayHandle, Watcher, start_monitor

    _require(args, "out_dir")
    traces = []
    if args.replay:
        traces = [ReplayHandle(p, args.label, args.rate).wait() for p in args.replay]
    else:
        config = MonitorConfig(args.targets, args.events, args.rate, args.duration,
                               args.scan_interval)
        if args.pid is not None:
            traces = [start_monitor(args.pid, config, args.label).wait()]
        else:
            watcher = Watcher(config, args.label)
            watcher.run(args.watch if args.watch is not None else args.duration)
            while not watcher.traces.empty():
                traces.append(watcher.traces.get()[1])
            for err in watcher.errors:
                log.warning("%s", err)
    if not traces:
        raise LeakedWebError("no traces collected")
    out = Path(args.out_dir)
    existing = load_dataset(out).traces if (out / MANIFEST_NAME).exists() else ()
    save_dataset(Dataset(tuple(existing) + tuple(traces)), out)
    log.info("collected %d traces into %s", len(traces), out)
    if args.forward:
        from .netexfil import client_send_trace

        for t in traces:
            result = client_send_trace(args.forward, t, args.client_id,
                                       spool_dir=args.spool_dir)
            print(json.dumps({"label": result.label, "scores": result.scores},
                             sort_keys=True))
    return 0


def cmd_serve(args) -> int:
    from .netexfil import serve

    _require(args, "model", "store")
    server = serve(args.bind, args.model, args.store, args.max_payload)
    log.warning("serving on %s", server.endpoint)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_send(args) -> int:
    from .netexfil import RetryPolicy, client_send_trace

    _require(args, "endpoint", "trace")
    trace = read_trace_csv(args.trace, "unknown", Provenance(args.rate, time.time(), "replay"))
    result = client_send_trace(
        args.endpoint, trace, args.client_id,
        RetryPolicy(args.attempts, args.base_delay, 2.0), args.spool_dir,
        max_payload=args.max_payload,
    )
    _write(args.out, _json_bytes({"label": result.label, "scores": result.scores}))
    return 0


def cmd_bench(args) -> int:
    from .collector import run_overhead_bench

    _require(args, "victim")
    report = run_overhead_bench(args.victim, args.rates, args.repetitions, args.events)
    _write(args.out, _json_bytes(report.to_dict()))
    return 0


# ------------------------------------------------------------------- parser


def _shared() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="FILE", help="JSON overlay of option values")
    p.add_argument("--seed", type=int, help=f"random seed (default: ${SEED_ENV} or 0)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def _split_flags(p: argparse.ArgumentParser, default: str) -> None:
    p.add_argument("--split", choices=("train", "test", "all"), default=default,
                   help="deterministic stratified split selected from the dataset")
    p.add_argument("--train-fraction", type=float, default=DEFAULT_TRAIN_FRACTION)


def build_parser() -> argparse.ArgumentParser:
    from .core import DEFAULT_EVENTS
    from .eval import AXES, FORMATS
    from .features import POLICIES
    from .learners.model import ALIASES, FAMILIES
    from .netexfil import MAX_PAYLOAD

    shared = _shared()
    parser = argparse.ArgumentParser(
        prog="leakedweb",
        description="Website fingerprinting from per-process performance counter traces.",
    )
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    families = sorted(set(FAMILIES) | set(ALIASES))

    p = sub.add_parser("collect", parents=[shared], help="sample counters of browser processes")
    p.add_argument("--targets", type=_csv_list, default=("firefox",))
    p.add_argument("--events", type=_csv_list, default=DEFAULT_EVENTS)
    p.add_argument("--rate", type=float, default=1.0, help="samples per second")
    p.add_argument("--duration", type=int, default=60, help="maximum seconds per trace")
    p.add_argument("--scan-interval", type=int, default=1)
    p.add_argument("--watch", type=float, help="seconds to keep scanning (default: duration)")
    p.add_argument("--pid", type=int, help="attach to one process instead of scanning")
    p.add_argument("--replay", nargs="+", metavar="CSV", help="import recorded traces")
    p.add_argument("--label", default="unlabelled")
    p.add_argument("--out-dir")
    p.add_argument("--forward", metavar="HOST:PORT", help="also upload each trace")
    p.add_argument("--client-id", default="client")
    p.add_argument("--spool-dir")
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("synth", parents=[shared], help="generate a synthetic dataset")
    p.add_argument("--signatures", metavar="JSON", help="signature file (default: benchmark)")
    p.add_argument("--sites", type=int, default=30, help="benchmark sites when no file given")
    p.add_argument("--traces", type=int, default=70)
    p.add_argument("--samples", type=int, default=60)
    p.add_argument("--open-world-extra", type=int, default=0)
    p.add_argument("--write-signatures", metavar="JSON")
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("rank", parents=[shared], help="rank events by label correlation")
    p.add_argument("--dataset")
    p.add_argument("--policy", choices=POLICIES, default="per_sample")
    p.add_argument("--out")
    _split_flags(p, "train")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("train", parents=[shared], help="fit a classifier")
    p.add_argument("--family", choices=families)
    p.add_argument("--dataset")
    p.add_argument("--ranking", metavar="JSON")
    p.add_argument("--top-k", type=int)
    p.add_argument("--events", type=_csv_list)
    p.add_argument("--params", type=_json_obj, help="JSON object of learner parameters")
    p.add_argument("--out")
    _split_flags(p, "train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[shared], help="classify one trace")
    p.add_argument("--model")
    p.add_argument("--trace")
    p.add_argument("--label", default="unknown")
    p.add_argument("--rate", type=float, default=1.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[shared], help="score a model on a dataset")
    p.add_argument("--model")
    p.add_argument("--dataset")
    p.add_argument("--format", choices=FORMATS, default="json")
    p.add_argument("--allow-unknown", action="store_true")
    p.add_argument("--out")
    _split_flags(p, "test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[shared], help="accuracy versus data budget")
    p.add_argument("--dataset", help="dataset directory (default: regenerate the benchmark)")
    p.add_argument("--sites", type=int, default=30)
    p.add_argument("--traces", type=int, default=70)
    p.add_argument("--samples", type=int, default=60)
    p.add_argument("--open-world-extra", type=int, default=0)
    p.add_argument("--open-world-mode", choices=("split", "test_only"), default="split")
    p.add_argument("--families", type=_csv_list, default=("logit_boost",))
    p.add_argument("--axes", type=_csv_list, default=AXES)
    p.add_argument("--train-traces-grid", type=_int_list)
    p.add_argument("--feature-count-grid", type=_int_list)
    p.add_argument("--samples-grid", type=_int_list)
    p.add_argument("--base-train-traces", type=int, default=50)
    p.add_argument("--base-features", type=int, default=4)
    p.add_argument("--base-samples", type=int, default=60)
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--train-fraction", type=float, default=DEFAULT_TRAIN_FRACTION)
    p.add_argument("--family-params", type=_json_obj)
    p.add_argument("--format", choices=FORMATS, default="json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("serve", parents=[shared], help="run the classification server")
    p.add_argument("--bind", default="127.0.0.1:7411")
    p.add_argument("--model")
    p.add_argument("--store")
    p.add_argument("--max-payload", type=int, default=MAX_PAYLOAD)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("send", parents=[shared], help="upload one trace for classification")
    p.add_argument("--endpoint")
    p.add_argument("--trace")
    p.add_argument("--rate", type=float, default=1.0)
    p.add_argument("--client-id", default="client")
    p.add_argument("--attempts", type=int, default=5)
    p.add_argument("--base-delay", type=float, default=1.0)
    p.add_argument("--spool-dir")
    p.add_argument("--max-payload", type=int, default=MAX_PAYLOAD)
    p.add_argument("--out")
    p.set_defaults(func=cmd_send)

    p = sub.add_parser("bench", parents=[shared], help="measure collection overhead")
    p.add_argument("--victim", help="command line of the workload to time")
    p.add_argument("--rates", type=_float_list, default=(1.0, 10.0, 100.0, 1000.0, 10000.0))
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--events", type=_csv_list, default=DEFAULT_EVENTS)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str], args) -> argparse.Namespace:
    """Reparse with the config file's values installed as defaults."""
    try:
        overlay = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(overlay, dict):
        raise UsageError("config file must hold a JSON object")
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in subparser._actions} - _NOT_CONFIGURABLE
    values = {}
    for key, value in overlay.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        action = next(a for a in subparser._actions if a.dest == dest)
        if isinstance(value, str) and action.type is not None:
            value = action.type(value)
        elif isinstance(value, list):
            value = tuple(value)
        values[dest] = value
    subparser.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("leakedweb: error: a subcommand is required", file=sys.stderr)
        return 2
    try:
        if args.config:
            args = _apply_config(parser, argv, args)
        args.seed = _resolve_seed(args)
        logging.basicConfig(
            level=logging.WARNING - 10 * min(args.verbose, 2),
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"leakedweb {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (LeakedWebError, ValueError, KeyError, OSError) as exc:
        print(f"leakedweb {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
