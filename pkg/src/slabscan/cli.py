"""Command line entry point.

Every subcommand reads one experiment config (JSON) and is deterministic
given that config plus the seed. Exit codes: 0 success, 2 config error,
3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigError, DataError, TrainingDivergenceError
from .experiment import (ExperimentConfig, ensure_corpus, eval_baselines,
                         export_attention, export_slabs, run_features,
                         run_scenario, run_stage1, run_stage2,
                         stage1_checkpoint_path)

_HELP = {
    "gen": "generate the synthetic training and test corpora",
    "preprocess": "materialize slab sequences as ASLB1 container files",
    "train-stage1": "train the slab encoder (stage I)",
    "extract-features": "encode every study with the frozen stage-I encoder",
    "train-stage2": "train the recurrent aggregator (stage II)",
    "run-scenario": "run the full pipeline for the configured scenario",
    "eval-baselines": "compare mean/max slab baselines with the aggregator",
    "export-attention": "write attention overlay images for studies",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slabscan",
        description="Two-stage volumetric lesion detection pipeline on a "
                    "synthetic confounded corpus.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")
    for name, help_text in _HELP.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", metavar="PATH",
                        help="experiment config JSON (default: built-in "
                             "desk-scale profile)")
        sp.add_argument("--seed", type=int, metavar="N",
                        help="global seed override; component seeds are "
                             "rederived from it")
        sp.add_argument("--force", action="store_true",
                        help="rebuild artifacts even when they exist")
        sp.add_argument("--resume", action="store_true",
                        help="skip stages whose checkpoints hash-match the "
                             "config")
        sp.add_argument("--out", metavar="DIR",
                        help="workspace directory for relative paths "
                             "(default: current directory)")
        if name == "export-attention":
            sp.add_argument("study_ids", nargs="*", metavar="STUDY_ID",
                            help="studies to render (default: annotated "
                                 "positive validation studies)")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config:
        config = ExperimentConfig.load(args.config)
    else:
        config = ExperimentConfig()
    if args.seed is not None:
        config = config.with_seed(args.seed)
    base = Path(args.out) if args.out else Path.cwd()
    config = dataclasses.replace(config, paths=config.paths.resolve(base))
    config.validate()
    return config


def _log(message: str) -> None:
    print(message, flush=True)


def _dispatch(command: str, config: ExperimentConfig,
              args: argparse.Namespace) -> None:
    if command == "gen":
        ensure_corpus(config.corpus, config.paths.corpus_dir,
                      force=args.force, log=_log)
        ensure_corpus(config.test_corpus_config(),
                      config.paths.test_corpus_dir, force=args.force,
                      log=_log)
    elif command == "preprocess":
        export_slabs(config, force=args.force, log=_log)
    elif command == "train-stage1":
        run_stage1(config, force=args.force, resume=args.resume, log=_log)
    elif command == "extract-features":
        stage1_path = stage1_checkpoint_path(config)
        if not stage1_path.exists():
            raise DataError(f"stage-1 checkpoint {stage1_path} not found; "
                            "run train-stage1 first")
        run_features(config, stage1_path, force=args.force, log=_log)
    elif command == "train-stage2":
        run_stage2(config, force=args.force, resume=args.resume, log=_log)
    elif command == "run-scenario":
        run_scenario(config, force=args.force, resume=args.resume, log=_log)
    elif command == "eval-baselines":
        eval_baselines(config, log=_log)
    elif command == "export-attention":
        out_dir = Path(config.paths.report_dir) / "attention"
        export_attention(config, args.study_ids or None, out_dir, log=_log)
    else:  # unreachable through argparse
        raise ConfigError(f"unknown command {command!r}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args)
        _dispatch(args.command, config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except TrainingDivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
