"""Command line entry point: train, suite, eval, export."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from .errors import ConfigError, InvalidInputError, NaNGradientError
from .harness import PARADIGMS, ExperimentConfig, evaluate, export_curves, run_baseline_suite, run_experiment
from .policy import load_checkpoint
from .tasks import load_tasks

EXIT_OK, EXIT_CONFIG, EXIT_NAN = 0, 2, 3


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    overrides = {}
    for name in ("seed", "paradigm"):
        if getattr(args, name, None) is not None:
            overrides[name] = getattr(args, name)
    if getattr(args, "out", None) is not None:
        overrides["output"] = args.out
    return replace(cfg, **overrides) if overrides else cfg


def cmd_train(args) -> int:
    summary = run_experiment(_config(args))
    keys = ("paradigm", "seed", "config_hash", "final_accuracy", "peak_accuracy", "sft_fraction")
    print(json.dumps({k: summary[k] for k in keys}, indent=2))
    return EXIT_OK


def cmd_suite(args) -> int:
    cfg = _config(args)
    table = run_baseline_suite(cfg, seeds=args.seeds)
    for row in table:
        print(f"{row['row']:<22} seed={row['seed']:<3} final={row['final_accuracy']:.3f} "
              f"peak={row['peak_accuracy']:.3f} sft_fraction={row['sft_fraction']:.3f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    report = evaluate(params, load_tasks(args.tasks), greedy=True)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_export(args) -> int:
    for name, path in export_curves(args.metrics, args.out).items():
        print(f"{name}: {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memorize-explore", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train one paradigm and evaluate it on held-out tasks")
    train.add_argument("--config", required=True)
    train.add_argument("--seed", type=int)
    train.add_argument("--paradigm", choices=PARADIGMS)
    train.add_argument("--out")
    train.set_defaults(func=cmd_train)

    suite = sub.add_parser("suite", help="run every paradigm on identical seeds and tasks")
    suite.add_argument("--config", required=True)
    suite.add_argument("--seeds", type=int, nargs="+")
    suite.add_argument("--out")
    suite.set_defaults(func=cmd_suite)

    ev = sub.add_parser("eval", help="greedy evaluation of a checkpoint on a JSONL task file")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--tasks", required=True)
    ev.set_defaults(func=cmd_eval)

    export = sub.add_parser("export", help="write one CSV per signal from a metrics file")
    export.add_argument("--metrics", required=True)
    export.add_argument("--out")
    export.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NaNGradientError as exc:
        print(f"non-finite gradient at step {exc.step}: {json.dumps(exc.diagnostics, sort_keys=True)}", file=sys.stderr)
        return EXIT_NAN
    except (InvalidInputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
