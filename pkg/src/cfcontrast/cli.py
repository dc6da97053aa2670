"""Command-line entry point.

One subcommand per pipeline stage plus ``run`` (full pipeline). The output
directory resolves, in order: ``--output-dir``, ``config.paths.output_dir``,
``$CFCONTRAST_CACHE_ROOT/<config hash>``, ``./runs/<config hash>``. On
failure a machine-readable error line is printed to stderr and the exit
code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import ExperimentConfig
from .pipeline import STAGE_ORDER, PipelineError, run_all, run_stage

_CACHE_ENV = "CFCONTRAST_CACHE_ROOT"


def resolve_output_dir(config: ExperimentConfig, cli_value: str | None) -> Path:
    if cli_value:
        return Path(cli_value)
    if config.paths.output_dir:
        return Path(config.paths.output_dir)
    root = os.environ.get(_CACHE_ENV)
    if root:
        return Path(root) / config.config_hash()
    return Path("runs") / config.config_hash()


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed_override is not None:
        config = replace(config, master_seed=args.seed_override)
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfcontrast",
        description="Counterfactual contrastive learning pipeline on synthetic scanner-shift data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=str, default=None, help="experiment config (.json or .yaml); defaults to the built-in desk config")
        p.add_argument("--output-dir", type=str, default=None, help="artifact directory (overrides config.paths.output_dir)")
        p.add_argument("--seed-override", type=int, default=None, help="replace the config's master seed")
        p.add_argument("--force", action="store_true", help="ignore stage caches and recompute")

    for stage in STAGE_ORDER:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        add_common(p)
        if stage == "pretrain":
            p.add_argument(
                "--strategy",
                type=str,
                required=True,
                choices=["simclr", "simclr-plus", "cf-simclr"],
            )

    p = sub.add_parser("run", help="run the full pipeline (all stages in order)")
    add_common(p)
    p.add_argument("--stage", type=str, default=None, choices=list(STAGE_ORDER), help="run a single stage instead")
    p.add_argument("--strategy", type=str, default=None, choices=["simclr", "simclr-plus", "cf-simclr"])

    p = sub.add_parser("show-config", help="print the resolved config as JSON")
    add_common(p)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args)
        out_dir = resolve_output_dir(config, args.output_dir)
        if args.command == "show-config":
            print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
            print(f"# config hash: {config.config_hash()}", file=sys.stderr)
            return 0
        if args.command == "run" and args.stage is None:
            results = run_all(config, out_dir, force=args.force)
            for r in results:
                status = "cached" if r.cache_hit else f"{r.duration_s:.1f}s"
                print(f"[{r.stage}] {status} -> {json.dumps(r.outputs)}")
            return 0
        stage = args.stage if args.command == "run" else args.command
        strategy = getattr(args, "strategy", None)
        result = run_stage(config, stage, out_dir, strategy=strategy, force=args.force)
        status = "cached" if result.cache_hit else f"{result.duration_s:.1f}s"
        print(f"[{result.stage}] {status} -> {json.dumps(result.outputs)}")
        return 0
    except (PipelineError, ValueError, KeyError, FileNotFoundError, IOError) as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
