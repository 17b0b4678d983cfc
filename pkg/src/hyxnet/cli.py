"""Command-line interface.

Exit codes: 0 success, 2 usage, 3 data error, 4 model error. Failures print a
single JSON object on stderr, e.g. ``{"error": "data", "message": "..."}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .encoder import fit_scaler
from .ingest import FeatureSchema, IngestError, LabelMap, format_log_line, parse_dataset, write_dataset
from .model import CheckpointError, load_checkpoint
from .nn import NonFiniteError
from .trainer import TrainConfig, TrainingError, encode_events, evaluate, run_experiment

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 2, 3, 4

log = logging.getLogger("hyxnet")


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind = kind
        self.code = code


def _data_error(msg):
    return CliError("data", str(msg), EXIT_DATA)


def _model_error(msg):
    return CliError("model", str(msg), EXIT_MODEL)


def _schema(args) -> FeatureSchema:
    return FeatureSchema.from_file(args.schema) if args.schema else FeatureSchema.default()


def _labels(args):
    return LabelMap(tuple(n.strip() for n in args.labels.split(","))) if args.labels else None


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise _model_error(f"checkpoint not found: {path}") from None
    except CheckpointError as exc:
        raise _model_error(exc) from None


def _check_schema(ckpt, schema: FeatureSchema):
    if schema.d_n != ckpt.config.d_n:
        raise _model_error(
            f"dimension mismatch: schema has d_n={schema.d_n} numeric columns "
            f"{schema.numeric_names}, checkpoint expects d_n={ckpt.config.d_n} {list(ckpt.scaler.names or [])}"
        )


def cmd_synth(args) -> int:
    from .synth import SynthSpec, generate

    classes = [c.strip() for c in args.classes.split(",")]
    events, labels = generate(SynthSpec.balanced(classes, args.per_class, args.seed))
    if args.shuffle:
        order = np.random.default_rng(args.seed).permutation(len(events))
        events = [events[i] for i in order]
    schema = FeatureSchema.default()
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.live:
        out.write_text("".join(format_log_line(e, schema) + "\n" for e in events), encoding="utf-8")
    else:
        write_dataset(out, events, schema, labels)
    print(json.dumps({"events": len(events), "classes": list(labels.names), "path": str(out)}))
    return EXIT_OK


def cmd_fit_scaler(args) -> int:
    schema = _schema(args)
    parsed = parse_dataset(args.data, schema, _labels(args), delimiter=args.delimiter, lenient=args.lenient)
    scaler = fit_scaler(np.array([e.numerics for e in parsed.events]).reshape(-1, schema.d_n), schema.numeric_names)
    doc = {
        "samples": len(parsed.events),
        "features": [
            {"name": n, "mean": float(m), "std": float(s), "zero_variance": i in scaler.constant}
            for i, (n, m, s) in enumerate(zip(schema.numeric_names, scaler.mean, scaler.std))
        ],
    }
    for i in scaler.constant:
        log.warning("feature %s has zero variance; std set to 1", schema.numeric_names[i])
    out = _out_dir(args) / "scaler.json"
    out.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    print(out)
    return EXIT_OK


def cmd_train(args) -> int:
    config = TrainConfig(
        batch_size=args.batch_size, max_epochs=args.epochs, seed=args.seed, lr=args.lr,
        weight_decay=args.weight_decay, clip=args.clip, train_ratio=args.train_ratio, val_ratio=args.val_ratio,
    )
    model_cfg = {"numeric_per_step": args.numeric_per_step}
    try:
        report = run_experiment(args.data, _schema(args), config, args.out, labels=_labels(args),
                                model_cfg=model_cfg, delimiter=args.delimiter, lenient=args.lenient)
    except (TrainingError, NonFiniteError) as exc:
        raise _model_error(exc) from None
    print(json.dumps({k: v for k, v in report.to_dict().items() if k in SUMMARY_KEYS}))
    return EXIT_OK


SUMMARY_KEYS = ("samples", "accuracy", "macro_precision", "macro_recall", "macro_f1", "misclassified")


def cmd_eval(args) -> int:
    ckpt = _load(args.model)
    schema = _schema(args) if args.schema else ckpt.schema or FeatureSchema.default()
    _check_schema(ckpt, schema)
    parsed = parse_dataset(args.data, schema, ckpt.labels, delimiter=args.delimiter, lenient=args.lenient)
    data = encode_events(parsed.events, ckpt.scaler, ckpt.config, ckpt.params["embedding"].dtype)
    report = evaluate(ckpt.params, ckpt.config, data, ckpt.labels)
    if args.out:
        report.write(_out_dir(args))
    print(json.dumps({k: v for k, v in report.to_dict().items() if k in SUMMARY_KEYS}))
    return EXIT_OK


def cmd_detect(args) -> int:
    from .stream import Detector, run_stream

    ckpt = _load(args.model)
    schema = _schema(args) if args.schema else ckpt.schema or FeatureSchema.default()
    _check_schema(ckpt, schema)
    benign = [b.strip() for b in args.benign.split(",")] if args.benign else None
    detector = Detector(ckpt, args.threshold, benign, args.block_threshold)
    if args.input and args.input != "-":
        with open(args.input, encoding="utf-8") as fh:
            summary = run_stream(fh, detector, sys.stdout, schema, args.log_delimiter)
    else:
        summary = run_stream(sys.stdin, detector, sys.stdout, schema, args.log_delimiter)
    print(json.dumps(summary.__dict__), file=sys.stderr)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .stream import Detector, bench

    ckpt = _load(args.model)
    schema = _schema(args) if args.schema else ckpt.schema or FeatureSchema.default()
    _check_schema(ckpt, schema)
    parsed = parse_dataset(args.data, schema, ckpt.labels, delimiter=args.delimiter, lenient=args.lenient)
    report = bench(parsed.events, Detector(ckpt), repetitions=args.reps)
    doc = report.to_dict()
    if args.out:
        (_out_dir(args) / "bench.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(doc))
    return EXIT_OK


REQUIRED = {
    "synth": ("output",),
    "fit-scaler": ("data", "out"),
    "train": ("data", "out"),
    "eval": ("model", "data"),
    "detect": ("model",),
    "bench": ("model", "data"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hyxnet", description="DNS tunnel detection with an xLSTM classifier.")
    parser.add_argument("--config", help="JSON file of flag defaults (keys are flag names); explicit flags win")
    parser.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, keeps runs bit-reproducible)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_flags(p):
        p.add_argument("--data", help="header-first CSV dataset")
        p.add_argument("--schema", help="schema file of name:kind lines (default: built-in 8-feature schema)")
        p.add_argument("--delimiter", default=",", help="CSV delimiter (default ,)")
        p.add_argument("--lenient", action="store_true", help="drop and count rows with bad numerics")

    p = sub.add_parser("synth", help="write a synthetic labeled corpus")
    p.add_argument("--output", "-o", help="output file")
    p.add_argument("--classes", default="normal,dnscat2,iodine")
    p.add_argument("--per-class", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shuffle", action="store_true")
    p.add_argument("--live", action="store_true", help="write unlabeled |-delimited log lines instead of CSV")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-scaler", help="fit feature standardization on a training file")
    data_flags(p)
    p.add_argument("--labels", help="comma-separated class names, in index order")
    p.add_argument("--out", help="output directory (writes scaler.json)")
    p.set_defaults(func=cmd_fit_scaler)

    p = sub.add_parser("train", help="split, train and evaluate; writes model.hyxn, train.log, report.txt, confusion.csv")
    data_flags(p)
    p.add_argument("--labels", help="comma-separated class names, in index order (default: inferred)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--train-ratio", type=float, default=0.6)
    p.add_argument("--val-ratio", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--numeric-per-step", action="store_true",
                   help="also concatenate the numerics to every recurrent input")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled dataset")
    data_flags(p)
    p.add_argument("--model", help="checkpoint file")
    p.add_argument("--out", help="directory for report.txt and confusion.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="classify a live record stream and emit JSON-line alerts on stdout")
    p.add_argument("--model", help="checkpoint file")
    p.add_argument("--schema", help="schema file (default: the one stored in the checkpoint)")
    p.add_argument("--input", help="record file (default: stdin)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--block-threshold", type=float, default=0.99)
    p.add_argument("--benign", help="comma-separated benign class names (default: normal,wildcard)")
    p.add_argument("--log-delimiter", default="|")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("bench", help="measure per-record detection latency")
    data_flags(p)
    p.add_argument("--model", help="checkpoint file")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--out", help="directory for bench.json")
    p.set_defaults(func=cmd_bench)
    return parser


def _apply_config(parser, argv):
    """Parse once to find --config, then re-parse with its values as defaults."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    pre, _ = probe.parse_known_args(argv)
    if not pre.config:
        return parser.parse_args(argv)
    try:
        defaults = json.loads(Path(pre.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read config file {pre.config}: {exc}")
    defaults = {k.replace("-", "_"): v for k, v in defaults.items()}
    for action in parser._subparsers._group_actions:
        for subparser in action.choices.values():
            subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    args = _apply_config(parser, argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    missing = [f"--{m.replace('_', '-')}" for m in REQUIRED[args.command] if not getattr(args, m, None)]
    if missing:
        sub.error(f"missing required flag(s): {' '.join(missing)}")
    if args.command == "detect" and not 0 < args.threshold < 1:
        sub.error("--threshold must be in (0, 1)")
    try:
        with threadpool_limits(args.threads):
            return args.func(args)
    except BrokenPipeError:
        # downstream reader went away (e.g. `| head`); stop quietly
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_OK
    except CliError as exc:
        err = exc
    except (IngestError, FileNotFoundError, UnicodeDecodeError) as exc:
        err = _data_error(exc)
    except CheckpointError as exc:
        err = _model_error(exc)
    except ValueError as exc:
        err = _data_error(exc)
    print(json.dumps({"error": err.kind, "message": str(err)}), file=sys.stderr)
    return err.code


if __name__ == "__main__":
    sys.exit(main())
