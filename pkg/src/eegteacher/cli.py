"""Command-line entry point: ``eegteacher <subcommand> ...``.

Exit codes: 0 ok, 1 usage or config error, 2 missing/invalid data,
3 numeric failure during training.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import ConfigError, dump_config, load_config, preset
from .evaluation import accuracy, format_report, mcnemar_exact, read_cache

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _config_args(p):
    p.add_argument("--config", metavar="FILE", help="YAML pipeline config (overlaid on --preset)")
    p.add_argument("--preset", choices=["full", "toy"], default="full",
                   help="base settings before --config is applied (default: full)")


def _work_args(p, data=True):
    if data:
        p.add_argument("--data", required=True, metavar="DIR",
                       help="data directory holding recordings/ and stimuli/")
    p.add_argument("--work", required=True, metavar="DIR", help="work directory for stage outputs")


def build_parser():
    parser = _Parser(prog="eegteacher", description="Teacher-pretrained EEG song classification pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic data directory")
    _config_args(p)
    p.add_argument("--out", required=True, metavar="DIR", help="output data directory")
    p.add_argument("--seed", type=int, help="override synth.seed")
    p.add_argument("--coupling", type=float, help="override synth.coupling (0..1)")

    p = sub.add_parser("prep", help="truncate, cut excerpts and split train/validation")
    _config_args(p)
    _work_args(p)

    p = sub.add_parser("features", help="compute teacher sequences (tokens, surprisal, entropy)")
    _config_args(p)
    _work_args(p)

    for stage, text in (("pretrain", "multitask pretraining with a teacher"),
                        ("finetune", "fine-tune a pretrained encoder on song ID only"),
                        ("fullscratch", "train the classifier from scratch")):
        p = sub.add_parser(stage, help=text)
        _config_args(p)
        _work_args(p)
        if stage != "fullscratch":
            p.add_argument("--teacher", required=True, choices=["muq", "surprisal", "entropy"],
                           help="teacher kind")
        p.add_argument("--seed", type=int, help="training seed (default: train.seed)")
        p.add_argument("--epochs", type=int, help="override the stage's epoch count")

    p = sub.add_parser("evaluate", help="validation logits of a run -> cache file")
    _config_args(p)
    _work_args(p)
    p.add_argument("--run", required=True, metavar="DIR", help="run directory with a checkpoint")

    p = sub.add_parser("ensemble", help="average class probabilities of several caches")
    p.add_argument("--caches", nargs="+", required=True, metavar="FILE", help="cache files (>= 2)")
    p.add_argument("--out", required=True, metavar="FILE", help="ensemble cache to write")
    p.add_argument("--tag", help="model tag of the ensemble cache")

    p = sub.add_parser("mcnemar", help="exact McNemar p-value, or a comparison report over caches")
    p.add_argument("--b", type=int, help="count correct only under model A")
    p.add_argument("--c", type=int, help="count correct only under model B")
    p.add_argument("--caches", nargs="+", metavar="FILE", help="caches to compare pairwise")
    p.add_argument("--out", metavar="PREFIX", help="write PREFIX.txt and PREFIX.json (with --caches)")

    p = sub.add_parser("config", help="print the effective config as YAML")
    _config_args(p)
    return parser


def _load_cfg(args):
    cfg = preset(args.preset)
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        cfg = load_config(args.config, base=cfg)
    return cfg


def _with_epochs(cfg, stage, epochs):
    if epochs is not None:
        if epochs <= 0:
            raise UsageError("--epochs must be positive")
        setattr(cfg.train, f"{stage}_epochs", epochs)
    return cfg


def run(argv=None):
    from . import pipeline

    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cmd = args.command

    if cmd == "mcnemar":
        if args.caches:
            report = pipeline.compare_caches(args.caches, args.out)
            sys.stdout.write(format_report(report))
            return EXIT_OK
        if args.b is None or args.c is None:
            raise UsageError("give --b and --c, or --caches")
        if args.b < 0 or args.c < 0:
            raise UsageError("--b and --c must be non-negative")
        print(repr(mcnemar_exact(args.b, args.c)))
        return EXIT_OK
    if cmd == "ensemble":
        ens = pipeline.stage_ensemble(args.caches, args.out, args.tag)
        print(f"{ens.model_tag}: {len(ens)} samples -> {args.out}")
        return EXIT_OK

    cfg = _load_cfg(args)
    if cmd == "config":
        sys.stdout.write(dump_config(cfg))
    elif cmd == "synth":
        if args.seed is not None:
            cfg.synth.seed = args.seed
        if args.coupling is not None:
            if not 0.0 <= args.coupling <= 1.0:
                raise UsageError("--coupling must lie in [0, 1]")
            cfg.synth.coupling = args.coupling
        data = pipeline.stage_synth(cfg, args.out)
        print(f"wrote {len(data.recordings)} recordings for {cfg.synth.songs} songs to {args.out}")
    elif cmd == "prep":
        split = pipeline.stage_prep(cfg, args.data, args.work)
        print(f"split: {len(split.train_excerpts)} train / {len(split.val_excerpts)} val excerpts")
    elif cmd == "features":
        feats = pipeline.stage_features(cfg, args.data, args.work)
        print("features: " + ", ".join(f"{k} ({len(v)} blocks)" for k, v in feats["blocks"].items()))
    elif cmd in ("pretrain", "finetune", "fullscratch"):
        cfg = _with_epochs(cfg, cmd, args.epochs)
        run_dir = pipeline.stage_train(cfg, args.data, args.work, cmd, getattr(args, "teacher", None), args.seed)
        print(run_dir)
    elif cmd == "evaluate":
        path = pipeline.stage_evaluate(cfg, args.data, args.work, args.run)
        print(json.dumps({"cache": path, "accuracy": accuracy(read_cache(path))}))
    return EXIT_OK


def main(argv=None):
    from .pipeline import DataError

    try:
        return run(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except (UsageError, ConfigError) as exc:
        print(f"eegteacher: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"eegteacher: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"eegteacher: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
