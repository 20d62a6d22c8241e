import argparse
import json
import signal
import sys
from pathlib import Path
from typing import Optional, Sequence

import structlog

from config.settings import AugmentConfig, TrainConfig
from controllers.checkpoint_controller import checkpoint_load
from controllers.export_controller import format_gradcheck_table, format_layer_table, format_param_report
from controllers.gradcheck_controller import run_suite
from controllers.training_controller import evaluate, run_protocol
from data.dataset.cifar_loader import load_cifar10, synthetic_split
from data.enums import (
    DEFAULT_EVAL_BATCH_SIZE,
    DEFAULT_STRAND_RATIO,
    GRADCHECK_SEEDS,
    GRADCHECK_TOLERANCE,
    PROSE_STRAND_RATIO,
    ArchName,
    AttentionKind,
    ExitCode,
    FileConstants,
    FillMode,
    L2Scope,
)
from data.errors import ChannelLocalError
from data.labeled_batch import LabeledBatch
from models.arch_spec import build_arch_spec
from models.network import attention_param_count, build_model, count_params
from utils.log import configure_logging
from utils.runtime import RuntimeContext

log = structlog.get_logger("main")


class UsageParser(argparse.ArgumentParser):
    """Argument parser that exits with the usage-error code."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(ExitCode.USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _add_data_source(parser: argparse.ArgumentParser) -> None:
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--data-dir", type=Path, help="Directory holding the CIFAR-10 binary batches")
    source.add_argument("--synthetic", type=int, metavar="N", help="Use N seeded synthetic training images")


def _add_arch(parser: argparse.ArgumentParser, defaults: bool) -> None:
    parser.add_argument(
        "--arch",
        choices=[arch.value for arch in ArchName],
        default=ArchName.PLANE.value if defaults else None,
        help="Architecture (default: plane)",
    )
    parser.add_argument(
        "--attn",
        choices=[kind.value for kind in AttentionKind],
        default=AttentionKind.CLOCAL.value if defaults else None,
        help="Attention block (default: clocal)",
    )
    parser.add_argument(
        "--strand-ratio",
        type=int,
        default=DEFAULT_STRAND_RATIO if defaults else None,
        help="C-Local strand kernel length is C / ratio (default: 8; 4 gives the longer kernel)",
    )
    parser.add_argument("--filter-ratio", type=int, help="C-Local stage-1 filter count is C / ratio (default: 4)")


def parse_arguments(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse command line arguments"""
    parser = UsageParser(
        prog="chanloc",
        description="Channel-locality attention blocks: training, evaluation, gradient checks and inspection",
    )
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")
    verbs = parser.add_subparsers(dest="verb", required=True, parser_class=UsageParser)

    train = verbs.add_parser("train", help="Train a model and write metrics and checkpoints")
    _add_arch(train, defaults=False)
    _add_data_source(train)
    train.add_argument("--config", type=Path, help="JSON TrainConfig used as the base for the flags below")
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--seed", type=int)
    train.add_argument("--lr", type=float, dest="lr0", help="Initial learning rate (default: 0.01)")
    train.add_argument("--decay", type=float, help="Learning-rate decay factor (default: 0.94)")
    train.add_argument("--decay-every", type=int, help="Epochs between decays (default: 2)")
    train.add_argument("--l2", type=float, help="L2 coefficient (default: 1e-4)")
    train.add_argument("--l2-scope", choices=[scope.value for scope in L2Scope])
    train.add_argument("--limit", type=int, help="Keep only the first N training images")
    train.add_argument("--repeats", type=int, default=1, help="Number of seeded runs (default: 1)")
    train.add_argument("--no-augment", action="store_true", help="Disable flips and shifts")
    train.add_argument("--fill", choices=[mode.value for mode in FillMode])
    train.add_argument("--max-shift", type=int)
    train.add_argument("--out", type=Path, default=FileConstants.DEFAULT_OUT_DIR, help="Output directory")

    evaluate_parser = verbs.add_parser("eval", help="Report test accuracy of a checkpoint")
    evaluate_parser.add_argument("--checkpoint", type=Path, required=True)
    _add_data_source(evaluate_parser)
    evaluate_parser.add_argument("--seed", type=int, default=0, help="Seed of the synthetic set")
    evaluate_parser.add_argument("--batch-size", type=int, default=DEFAULT_EVAL_BATCH_SIZE)

    gradcheck = verbs.add_parser("gradcheck", help="Finite-difference check of every backward pass")
    gradcheck.add_argument("--op", default="all", help="Op name or 'all'")
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--seeds", type=int, default=GRADCHECK_SEEDS, help="Consecutive seeds per op")
    gradcheck.add_argument("--tol", type=float, default=GRADCHECK_TOLERANCE)
    gradcheck.add_argument("--no-precision-check", action="store_true", help="Skip float32 agreement rows")

    inspect = verbs.add_parser("inspect", help="Print the layer table and parameter counts")
    _add_arch(inspect, defaults=True)

    return parser.parse_args(argv)


def echo_config(payload: dict) -> None:
    """Print the resolved configuration as one JSON line on stdout."""
    print(json.dumps(payload, sort_keys=True, default=str), flush=True)


def resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    """
    Defaults, then ``--config``, then explicit flags.

    Raises:
        ValueError: If a value fails validation
    """
    base = TrainConfig.load(args.config) if args.config else TrainConfig()
    data = base.to_dict()
    overrides = {
        "arch": args.arch,
        "attention": args.attn,
        "strand_ratio": args.strand_ratio,
        "filter_ratio": args.filter_ratio,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "seed": args.seed,
        "lr0": args.lr0,
        "decay": args.decay,
        "decay_every": args.decay_every,
        "l2": args.l2,
        "l2_scope": args.l2_scope,
    }
    data.update({key: value for key, value in overrides.items() if value is not None})

    augment = dict(data["augment"])
    if args.fill is not None:
        augment["fill"] = args.fill
    if args.max_shift is not None:
        augment["max_shift"] = args.max_shift
    data["augment"] = AugmentConfig.disabled() if args.no_augment else AugmentConfig(**augment)
    return TrainConfig.from_dict(data)


def load_data(args: argparse.Namespace, seed: int) -> tuple[LabeledBatch, LabeledBatch]:
    if args.synthetic is not None:
        return synthetic_split(args.synthetic, seed)
    return load_cifar10(args.data_dir, getattr(args, "limit", None))


def _raise_interrupt(signum, frame):
    raise KeyboardInterrupt


def run_train(args: argparse.Namespace) -> int:
    cfg = resolve_train_config(args)
    echo_config(cfg.to_dict())
    train_data, test_data = load_data(args, cfg.seed)
    if args.synthetic is not None and args.limit is not None:
        train_data = train_data.head(args.limit)

    previous = signal.signal(signal.SIGTERM, _raise_interrupt)
    try:
        runs = run_protocol(cfg, train_data, test_data, args.out, args.repeats)
    finally:
        signal.signal(signal.SIGTERM, previous)
    for run in runs:
        print(f"seed={run.seed} best_test_acc={run.best_test_acc:.4f} best_epoch={run.best_epoch}")
    return ExitCode.SUCCESS


def run_eval(args: argparse.Namespace) -> int:
    model = checkpoint_load(args.checkpoint)
    echo_config(
        {
            "checkpoint": str(args.checkpoint),
            **model.spec.describe(),
            "data_dir": args.data_dir,
            "synthetic": args.synthetic,
            "seed": args.seed,
            "batch_size": args.batch_size,
        }
    )
    _, test_data = load_data(args, args.seed)
    test_loss, test_acc = evaluate(model, test_data, args.batch_size)
    print(f"test_loss={test_loss:.6f} test_acc={test_acc:.4f}")
    return ExitCode.SUCCESS


def run_gradcheck(args: argparse.Namespace) -> int:
    echo_config(
        {
            "op": args.op,
            "seed": args.seed,
            "seeds": args.seeds,
            "tol": args.tol,
            "precision_check": not args.no_precision_check,
        }
    )
    reports = run_suite(args.op, args.seed, args.seeds, args.tol, not args.no_precision_check)
    print(format_gradcheck_table(row for report in reports for row in report.rows()))
    failed = sum(not report.passed for report in reports)
    print(f"{len(reports) - failed}/{len(reports)} checks passed")
    return ExitCode.SUCCESS if failed == 0 else ExitCode.GRADCHECK_FAILURE


def run_inspect(args: argparse.Namespace) -> int:
    ratios = {"strand_ratio": args.strand_ratio}
    if args.filter_ratio is not None:
        ratios["filter_ratio"] = args.filter_ratio
    spec = build_arch_spec(args.arch, args.attn, **ratios)
    echo_config(spec.describe())

    counts = {
        kind: count_params(build_model(build_arch_spec(args.arch, kind, **ratios)))
        for kind in AttentionKind
    }
    other_ratio = PROSE_STRAND_RATIO if args.strand_ratio != PROSE_STRAND_RATIO else DEFAULT_STRAND_RATIO
    other = build_model(build_arch_spec(args.arch, AttentionKind.CLOCAL, **{**ratios, "strand_ratio": other_ratio}))

    print(format_layer_table(spec))
    print()
    print(format_param_report(counts, {f"clocal L=C/{other_ratio}": count_params(other)}))
    print()
    model = build_model(spec)
    print(f"attention overhead: {attention_param_count(model)} params")
    return ExitCode.SUCCESS


COMMANDS = {
    "train": run_train,
    "eval": run_eval,
    "gradcheck": run_gradcheck,
    "inspect": run_inspect,
}


def run(args: argparse.Namespace) -> int:
    """Dispatch a parsed command and map failures onto exit codes."""
    try:
        return int(COMMANDS[args.verb](args))
    except ChannelLocalError as e:
        log.error("command failed", verb=args.verb, error=str(e), kind=type(e).__name__)
        return int(e.exit_code)
    except ValueError as e:
        log.error("invalid arguments", verb=args.verb, error=str(e))
        return int(ExitCode.USAGE_ERROR)
    except KeyboardInterrupt:
        log.warning("interrupted", verb=args.verb)
        return int(ExitCode.INTERRUPTED)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main application entry point"""
    args = parse_arguments(argv)
    configure_logging(args.debug)
    RuntimeContext()
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
