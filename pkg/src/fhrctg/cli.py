"""Command-line surface: synth, preprocess, pretrain, train, infer, eval,
sweep, and fischer subcommands.

Exit codes: 0 success, 1 usage error, 2 data/format error. Every run with
identical inputs, flags, and seed produces byte-identical outputs; --threads
(default from FHRCTG_THREADS) only parallelizes per-record work and never
changes output order or content.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .io import (
    DataFormatError,
    bundle_to_dict,
    read_predictions,
    read_records,
    write_predictions,
    write_records,
    write_report,
)
from .metrics import fischer_bpm, fischer_cpm
from .model import (
    CheckpointError,
    TrainingError,
    build_model,
    load_checkpoint,
    predict_record,
    run_pretraining,
    run_supervised_training,
    save_checkpoint,
)
from .preprocess import build_features
from .synth import SynthParams, _splitmix64, generate_dataset
from .types import EngineConfig, validate_record

USAGE_ERROR = 1
DATA_ERROR = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _emit(args, payload: dict, stream=None):
    stream = stream or sys.stdout
    if getattr(args, "json", False):
        print(json.dumps(payload, sort_keys=True), file=stream)
    else:
        print(", ".join(f"{k}={v}" for k, v in payload.items()), file=stream)


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("FHRCTG_THREADS", "1")))
    except ValueError:
        return 1


def _map_ordered(fn, items, threads: int):
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _child_seeds(master: int, n: int) -> list[int]:
    state = int(master) & ((1 << 64) - 1)
    seeds = []
    for _ in range(n):
        child, state = _splitmix64(state)
        seeds.append(child)
    return seeds


def _config_from_args(args) -> EngineConfig:
    kwargs = {}
    if getattr(args, "embed_dim", None) is not None:
        kwargs["embed_dim"] = args.embed_dim
    if getattr(args, "heads", None) is not None:
        kwargs["heads"] = args.heads
    if getattr(args, "layers", None) is not None:
        kwargs["decoder_layers"] = args.layers
    kwargs["seed"] = getattr(args, "seed", 0)
    return EngineConfig(**kwargs)


def _load_valid_records(path):
    records = read_records(path)
    for rec in records:
        problems = validate_record(rec)
        if problems:
            raise DataFormatError(f"record {rec.id!r}: " + "; ".join(problems))
    return records


def _interval_sections(truth_records, predictions, cfg, theta):
    from .metrics import SpanKind, evaluate_tags
    from .types import tags_from_annotations

    truth_by_id = {r.id: r for r in truth_records}
    pairs = []
    for pred in predictions:
        truth = truth_by_id.get(pred.record.id)
        if truth is None:
            raise DataFormatError(f"prediction {pred.record.id!r} has no truth record")
        pairs.append((tags_from_annotations(truth), pred.tags))
    out = {}
    for kind in (SpanKind.ACCEL, SpanKind.DECEL):
        counts = evaluate_tags(
            [t for t, _ in pairs], [p for _, p in pairs], kind, theta, cfg
        )
        out[kind.value] = counts.as_dict()
    return out


# -- subcommand handlers ------------------------------------------------------

def _cmd_synth(args) -> int:
    params = SynthParams(
        minutes=args.minutes,
        noise_sd=args.noise_sd,
        dropout_prob=args.dropout,
    )
    records = generate_dataset(args.n, params, args.seed)
    write_records(records, args.out)
    _emit(args, {"written": len(records), "out": args.out})
    return 0


def _cmd_preprocess(args) -> int:
    cfg = _config_from_args(args)
    records = _load_valid_records(args.infile)
    seeds = _child_seeds(args.seed, len(records))

    def work(pair):
        rec, seed = pair
        return bundle_to_dict(rec.id, build_features(rec, cfg, seed))

    rows = _map_ordered(work, list(zip(records, seeds)), args.threads)
    with open(args.out, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    _emit(args, {"processed": len(rows), "out": args.out})
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _config_from_args(args)
    records = _load_valid_records(args.infile)
    model = build_model(cfg)
    losses = run_pretraining(model, records, args.steps, args.lr, args.seed)
    save_checkpoint(model, args.ckpt)
    _emit(
        args,
        {
            "steps": len(losses),
            "first_loss": round(losses[0], 6) if losses else None,
            "last_loss": round(losses[-1], 6) if losses else None,
            "ckpt": args.ckpt,
        },
    )
    return 0


def _cmd_train(args) -> int:
    records = _load_valid_records(args.infile)
    if args.ckpt_in:
        model, cfg = load_checkpoint(args.ckpt_in)
    else:
        model = build_model(_config_from_args(args))
    losses = run_supervised_training(model, records, args.epochs, args.lr, args.seed)
    save_checkpoint(model, args.ckpt_out)
    _emit(
        args,
        {
            "epochs": len(losses),
            "first_loss": round(losses[0], 6) if losses else None,
            "last_loss": round(losses[-1], 6) if losses else None,
            "ckpt": args.ckpt_out,
        },
    )
    return 0


def _cmd_infer(args) -> int:
    records = _load_valid_records(args.infile)
    model, _cfg = load_checkpoint(args.ckpt)
    seeds = _child_seeds(args.seed, len(records))

    def work(pair):
        rec, seed = pair
        return predict_record(model, rec, seed)

    preds = _map_ordered(work, list(zip(records, seeds)), args.threads)
    write_predictions(preds, args.out)
    _emit(args, {"predicted": len(preds), "out": args.out})
    return 0


def _cmd_eval(args) -> int:
    from .metrics import build_report

    truth = _load_valid_records(args.truth)
    preds = read_predictions(args.pred)
    cfg = EngineConfig(iol_threshold=args.iol)
    report = build_report(truth, preds, cfg, args.iol).to_dict()
    if args.out:
        write_report(report, args.out)
        _emit(args, {"out": args.out})
    else:
        print(json.dumps(report, sort_keys=True, indent=2))
    return 0


def _parse_grid(spec: str) -> list[float]:
    try:
        start, stop, step = (float(v) for v in spec.split(":"))
    except ValueError as exc:
        raise _UsageError(f"bad grid {spec!r}; expected start:stop:step") from exc
    if step <= 0 or stop < start:
        raise _UsageError(f"bad grid {spec!r}; need step > 0 and stop >= start")
    grid = []
    k = 0
    while True:
        value = round(start + k * step, 12)
        if value > stop + 1e-12:
            break
        grid.append(value)
        k += 1
    return grid


def _cmd_sweep(args) -> int:
    truth = _load_valid_records(args.truth)
    preds = read_predictions(args.pred)
    grid = _parse_grid(args.grid)
    cfg = EngineConfig()
    rows = [
        {"theta": theta, "intervals": _interval_sections(truth, preds, cfg, theta)}
        for theta in grid
    ]
    payload = {"grid": grid, "rows": rows}
    if args.out:
        write_report(payload, args.out)
        _emit(args, {"out": args.out, "points": len(grid)})
    else:
        print(json.dumps(payload, sort_keys=True, indent=2))
    return 0


def _cmd_fischer(args) -> int:
    if (args.cpm is None) == (args.bpm is None):
        raise _UsageError("exactly one of --cpm or --bpm is required")
    if args.cpm is not None:
        bucket = fischer_cpm(args.cpm)
        _emit(args, {"cpm": args.cpm, "bucket": bucket})
    else:
        bucket = fischer_bpm(args.bpm)
        _emit(args, {"bpm": args.bpm, "bucket": bucket})
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fhrctg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--json", action="store_true", help="machine-readable output")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="generate a synthetic record set")
    common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--minutes", type=int, default=20, choices=(10, 20, 40))
    p.add_argument("--noise-sd", type=float, default=2.0, dest="noise_sd")
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("preprocess", help="extract feature bundles")
    common(p)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("pretrain", help="masked-recovery pretraining")
    common(p)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--embed-dim", type=int, dest="embed_dim")
    p.add_argument("--heads", type=int)
    p.add_argument("--layers", type=int)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("train", help="supervised training")
    common(p)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--ckpt-in", dest="ckpt_in")
    p.add_argument("--ckpt-out", dest="ckpt_out", required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--embed-dim", type=int, dest="embed_dim")
    p.add_argument("--heads", type=int)
    p.add_argument("--layers", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="predict tags and variability labels")
    common(p)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="score predictions against truth")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--iol", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="sensitivity/specificity over a threshold grid")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--grid", default="0.1:0.9:0.05")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("fischer", help="bucket a variability value")
    common(p)
    p.add_argument("--cpm", type=int)
    p.add_argument("--bpm", type=int)
    p.set_defaults(func=_cmd_fischer)

    return parser


def run(argv) -> int:
    """Dispatch one CLI invocation; never raises for expected failures."""
    parser = build_parser()
    want_json = "--json" in (argv or [])
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        _print_error("usage", str(exc), want_json)
        return USAGE_ERROR
    try:
        return args.func(args)
    except _UsageError as exc:
        _print_error("usage", str(exc), want_json)
        return USAGE_ERROR
    except FileNotFoundError as exc:
        _print_error("io", f"{exc.filename}: file not found", getattr(args, "json", False))
        return DATA_ERROR
    except (DataFormatError, CheckpointError, TrainingError, ValueError) as exc:
        _print_error(type(exc).__name__, str(exc), getattr(args, "json", False))
        return DATA_ERROR


def _print_error(kind: str, message: str, as_json: bool):
    if as_json:
        print(json.dumps({"error": kind, "message": message}, sort_keys=True), file=sys.stderr)
    else:
        print(f"fhrctg: {kind} error: {message}", file=sys.stderr)


def main(argv=None) -> int:
    return run(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
