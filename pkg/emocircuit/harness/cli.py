"""Command-line entry point: one sub-command per pipeline stage, plus the full pipeline."""

import argparse
import sys
from collections.abc import Callable, Sequence
from typing import Any

from emocircuit.config import RunConfig
from emocircuit.exceptions import DataError, NumericError
from emocircuit.harness._pipeline import Pipeline
from emocircuit.utils.canonical import canonical_line

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

COMMANDS: dict[str, tuple[Callable[[Pipeline], dict[str, Any]], str]] = {
    "gen-data": (Pipeline.write_dataset, "Generate the contrastive pairs and the probe set."),
    "plant-model": (Pipeline.write_model, "Build the planted model and save its weights."),
    "extract-steering": (Pipeline.write_steering, "Extract hit-rate filtered steering vectors."),
    "scan-layers": (Pipeline.write_layer_scans, "Scan steering injection over layers."),
    "locate-heads": (Pipeline.write_heads, "Rank upstream heads by latent restoration."),
    "trace-neurons": (Pipeline.write_neurons, "Attribute the top heads to upstream neurons."),
    "saliency": (Pipeline.write_saliency, "Gradient-weighted attention flow per emotion."),
    "logit-lens": (Pipeline.write_logit_lens, "Read steering vectors and visual residuals through the lens."),
    "phase-patch": (Pipeline.write_phase_patch, "Patch role groups over each phase."),
    "knockout": (Pipeline.write_knockout, "Knock out and recover the discovered heads."),
    "run-veena": (Pipeline.write_veena, "Build the intervention and audit its selection and side effects."),
    "evaluate": (Pipeline.write_eval, "Score probe decodes with and without the intervention."),
    "full-pipeline": (Pipeline.run, "Run every stage in order."),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> Any:
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="emocircuit", description="Emotional-circuit discovery and intervention on a toy model.")
    commands = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        command = commands.add_parser(name, help=help_text, description=help_text)
        command.add_argument("--config", help="RunConfig JSON file (default: environment and defaults)")
        command.add_argument("--seed", type=int, help="Override the run seed")
        command.add_argument("--out", help="Override the output directory")
        command.add_argument("--workers", type=int, help="Override the sweep thread pool size")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.from_json(args.config) if args.config else RunConfig()
    overrides: dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.workers is not None:
        overrides["workers"] = args.workers
    return config.with_overrides(**overrides) if overrides else config


def main(argv: Sequence[str] | None = None) -> int:
    """
    Run one sub-command and print a one-line summary.

    Returns:
        0 on success, 1 on a usage or configuration error, 2 on a data error, 3 on a numeric
        or degenerate-input error.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        sys.stderr.write(str(e))
        return EXIT_USAGE
    if args.command is None:
        sys.stderr.write(parser.format_help())
        return EXIT_USAGE
    try:
        config = load_config(args)
    except (DataError, FileNotFoundError) as e:
        sys.stderr.write(f"emocircuit: {e}\n")
        return EXIT_DATA
    except ValueError as e:
        sys.stderr.write(f"emocircuit: invalid configuration: {e}\n")
        return EXIT_USAGE
    stage, _ = COMMANDS[args.command]
    try:
        summary = stage(Pipeline(config))
    except DataError as e:
        sys.stderr.write(f"emocircuit {args.command}: {e}\n")
        return EXIT_DATA
    except NumericError as e:
        sys.stderr.write(f"emocircuit {args.command}: {e}\n")
        return EXIT_NUMERIC
    sys.stdout.write(f"{args.command}: {canonical_line(summary)}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
