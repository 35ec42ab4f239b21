"""CLI commands for cmota."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, NoReturn

from cmota.errors import (
    CheckpointError,
    CmotaError,
    MissingArtifactError,
    NumericalError,
)

logger = logging.getLogger("cmota")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_MISSING = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        print(f"Error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _configure_logging(verbose: bool) -> None:
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stdout)
        handler.setFormatter(logging.Formatter("%(message)s"))
        logger.addHandler(handler)
        logger.propagate = False
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)


def _load(args: argparse.Namespace) -> Any:
    from cmota._config import load_config
    from cmota._run_ops import resolve_vocab_size

    config = load_config(
        Path(args.config) if args.config else None,
        environ=os.environ,
        cli={"seed": args.seed, "out": args.out, "preset": args.preset},
    )
    return resolve_vocab_size(config)


def gen_data(args: argparse.Namespace) -> int:
    from cmota._run_ops import generate_data, open_run

    config = _load(args)
    generate_data(config, open_run(config))
    return EXIT_OK


def fit_codebook(args: argparse.Namespace) -> int:
    from cmota._run_ops import fit_codebook_artifact, open_run

    config = _load(args)
    fit_codebook_artifact(config, open_run(config), force=args.force)
    return EXIT_OK


def train(args: argparse.Namespace) -> int:
    from cmota._run_ops import open_run, train_run

    config = _load(args)
    train_run(config, open_run(config), force=args.force, max_steps=args.max_steps)
    return EXIT_OK


def evaluate(args: argparse.Namespace) -> int:
    from cmota._run_ops import eval_run, open_run

    config = _load(args)
    report = eval_run(config, open_run(config), force=args.force)
    print(f"Report: {Path(config.out) / 'eval' / 'report.json'} ({report.n_samples} stories)")
    return EXIT_OK


def sample(args: argparse.Namespace) -> int:
    from cmota._run_ops import open_run, sample_run

    config = _load(args)
    record = sample_run(
        config, open_run(config), args.sentence, force=args.force, png=not args.no_png
    )
    for sentence, caption in zip(record["sentences"], record["captions"]):
        print(f"  {sentence}  ->  {caption}")
    return EXIT_OK


def inspect_memory(args: argparse.Namespace) -> int:
    from cmota._run_ops import inspect_memory_run, open_run

    config = _load(args)
    inspect_memory_run(config, open_run(config), force=args.force, max_stories=args.stories)
    return EXIT_OK


def ablate(args: argparse.Namespace) -> int:
    from cmota.ablate import run_ablation, select_arms

    config = _load(args)
    results = run_ablation(config, select_arms(args.arm), force=args.force)
    print(f"Table: {Path(config.out) / 'ablate' / 'table.md'} ({len(results)} arm(s))")
    return EXIT_OK


_COMMANDS = {
    "gen-data": (gen_data, "Generate the synthetic story dataset"),
    "fit-codebook": (fit_codebook, "Fit the patch codebook and text vocabulary"),
    "train": (train, "Train (or resume) the model"),
    "eval": (evaluate, "Evaluate the latest checkpoint on the test split"),
    "sample": (sample, "Generate frames and captions for given sentences"),
    "inspect-memory": (inspect_memory, "Dump memory attention weights"),
    "ablate": (ablate, "Run the ablation arms and write the comparison table"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, default=None, help="Run seed")
    common.add_argument("--out", default=None, help="Run directory")
    common.add_argument(
        "--preset", choices=("desk", "paper"), default=None, help="Base preset (default: desk)"
    )
    common.add_argument(
        "--force", action="store_true", help="Use artifacts produced under another config"
    )
    common.add_argument("-v", "--verbose", action="store_true", help="Show timing and debug output")

    parser = _Parser(prog="cmota", description="cmota story visualization tools")
    subparsers = parser.add_subparsers(
        dest="command", help="Available commands", parser_class=_Parser
    )
    commands = {
        name: subparsers.add_parser(name, help=text, parents=[common])
        for name, (_, text) in _COMMANDS.items()
    }

    commands["train"].add_argument(
        "--max-steps", type=int, default=None, help="Stop after this many total steps"
    )
    commands["sample"].add_argument(
        "--sentence", action="append", default=None, help="One sentence per frame (repeatable)"
    )
    commands["sample"].add_argument("--no-png", action="store_true", help="Skip PNG export")
    commands["inspect-memory"].add_argument(
        "--stories", type=int, default=4, help="Test stories to trace"
    )
    commands["ablate"].add_argument(
        "--arm", default=None, help="One arm name, or 'all' for the full factorial"
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    """Main entry point for the cmota CLI."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_OK
    _configure_logging(args.verbose)

    handler = _COMMANDS[args.command][0]
    try:
        return handler(args)
    except (MissingArtifactError, CheckpointError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CmotaError, ValueError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
