import argparse
import sys
from typing import Any, List, Optional

from src.pipeline_focusft.experiment_pipeline import (SWEEP_AXES, ExperimentPipeline, resolve_config,
                                                      validate_config)
from src.utils.errors import (ConfigError, InputError, NumericalError, StepAbortedError, TaskError,
                              UsageError)
from src.utils.monitors import HighLevelErrors, PipelineOperation, set_console_level

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ABORTED = 2


class LabArgumentParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; here 2 is reserved for aborted training."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        HighLevelErrors.error(f"{self.prog}: {message}")
        sys.exit(EXIT_USAGE)


def parse_values(axis: str, raw: str) -> List[Any]:
    items = [item.strip() for item in raw.split(",") if item.strip()]
    if not items:
        raise ConfigError("--values needs at least one comma-separated value.")
    if axis == "mode":
        return items
    try:
        return [int(item) for item in items] if axis == "K" else [float(item) for item in items]
    except ValueError as e:
        raise ConfigError(f"Could not parse --values '{raw}' for axis {axis}: {e}") from e


def build_parser() -> argparse.ArgumentParser:
    parser = LabArgumentParser(prog="focusft", description="Desk-scale bilevel fine-tuning lab.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="Console threshold; log files are unaffected.")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=LabArgumentParser)

    def run_options(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", help="Flat YAML run file.")
        sub.add_argument("--preset", choices=["toy", "paper"], help="Shipped preset (used when --config is absent).")
        sub.add_argument("--seed", type=int)
        sub.add_argument("--mode", help="standard_sft | sft_bidir | causal_bilevel | focusft")

    train = commands.add_parser("train", help="Train one model and write a run directory.")
    run_options(train)
    train.add_argument("--out", help="Run directory (overrides output_dir).")

    evaluate = commands.add_parser("eval", help="Greedy exact-match evaluation of a checkpoint.")
    run_options(evaluate)
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--dataset", required=True, help="JSONL dataset written by 'train'.")
    evaluate.add_argument("--out", required=True)
    evaluate.add_argument("--bins", type=int, default=5)
    evaluate.add_argument("--adapt", action="store_true", help="Also report test-time-adapted accuracy.")

    analyze = commands.add_parser("analyze", help="Attention diagnostics for one sample.")
    analyze.add_argument("--checkpoint", required=True)
    analyze.add_argument("--samples", required=True, help="JSONL dataset holding the sample.")
    analyze.add_argument("--index", type=int, default=0)
    analyze.add_argument("--out", required=True)
    analyze.add_argument("--layer", type=int)
    analyze.add_argument("--sink-window", type=int, default=5)
    analyze.add_argument("--all-queries", action="store_true")

    sweep = commands.add_parser("sweep", help="One run per value of a single hyperparameter.")
    run_options(sweep)
    sweep.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sweep.add_argument("--values", required=True, help="Comma-separated values.")
    sweep.add_argument("--out", required=True)

    check = commands.add_parser("validate-config", help="Validate a run file without computing.")
    run_options(check)
    return parser


def run(args: argparse.Namespace) -> int:
    pipeline = ExperimentPipeline()
    if args.command == "analyze":
        pipeline.analyze(args.checkpoint, args.samples, args.out, index=args.index, w=args.sink_window,
                         layer=args.layer, all_queries=args.all_queries)
        return EXIT_OK

    if args.command == "validate-config":
        validate_config(args.config, args.preset, seed=args.seed, mode=args.mode)
        return EXIT_OK

    config = resolve_config(args.config, args.preset, seed=args.seed, mode=args.mode)
    if args.command == "train":
        pipeline.train(config, args.out)
    elif args.command == "eval":
        pipeline.evaluate(args.checkpoint, args.dataset, args.out, bins=args.bins, adapt=args.adapt, config=config)
    elif args.command == "sweep":
        pipeline.sweep(config, args.axis, parse_values(args.axis, args.values), args.out)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    set_console_level(args.log_level)
    try:
        return run(args)
    except (StepAbortedError, NumericalError) as e:
        HighLevelErrors.error(f"Training aborted: {e}")
        return EXIT_ABORTED
    except (ConfigError, InputError, TaskError, UsageError, FileNotFoundError) as e:
        HighLevelErrors.error(f"{args.command} failed: {e}")
        return EXIT_USAGE
    finally:
        PipelineOperation.info(f"Command '{args.command}' finished.")


if __name__ == "__main__":
    sys.exit(main())
