"""
Command-line interface
Commands: gen, train, apply, eval, selfcheck. Every command prints its fully
resolved configuration before acting.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError

from app.checkpoint_manager import CheckpointManager
from app.color import lab_to_srgb, read_png, srgb_to_lab, write_png
from app.config import config, load_config_file, setup_logging
from app.dataset import load_dataset, load_pairs, read_split, save_dataset
from app.errors import CheckpointError, ConfigError, DatasetError, ShapeError, StylizeError
from app.network import BackboneConfig, forward, parameter_count
from app.selfcheck import run_selfcheck
from app.styles import MIN_SIDE, STYLE_NAMES, make_dataset, make_style
from app.training import TrainConfig, evaluate, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CHECK_FAILED = 4
EXIT_INVALID_INPUT = 5

# ``seed`` drives both initialization and sampling
BACKBONE_KEYS = set(BackboneConfig.model_fields) - {"seed"}
TRAIN_KEYS = set(TrainConfig.model_fields)
CONFIG_KEYS = BACKBONE_KEYS | TRAIN_KEYS


def parse_run_config(
    values: dict[str, str], seed: Optional[int] = None
) -> tuple[BackboneConfig, TrainConfig]:
    """
    Split flat config values into the architecture and training models.

    Args:
        values: Raw strings from a config file
        seed: Overrides the file's ``seed`` for both models when given

    Raises:
        ConfigError: On unknown keys or values that fail validation
    """
    unknown = sorted(set(values) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    backbone_values = {k: v for k, v in values.items() if k in BACKBONE_KEYS}
    train_values = {k: v for k, v in values.items() if k in TRAIN_KEYS}
    if seed is not None:
        train_values["seed"] = seed
    if "seed" in train_values:
        backbone_values["seed"] = train_values["seed"]
    try:
        return BackboneConfig(**backbone_values), TrainConfig(**train_values)
    except ValidationError as e:
        raise ConfigError(f"invalid config: {e}") from e


def _format_value(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def echo_config(command: str, settings: dict) -> None:
    print(f"# {command}")
    for key in sorted(settings):
        print(f"{key} = {_format_value(settings[key])}")
    print()


def cmd_gen(args: argparse.Namespace) -> int:
    out_dir = Path(args.out or config.DATA_DIR)
    echo_config(
        "gen",
        {
            "style": args.style,
            "seed": args.seed,
            "n_train": args.n_train,
            "n_test": args.n_test,
            "width": args.width,
            "height": args.height,
            "out": out_dir,
        },
    )
    if args.n_train < 1 or args.n_test < 1:
        raise ConfigError(f"--n-train and --n-test must be >= 1, got {args.n_train}/{args.n_test}")
    if min(args.width, args.height) < MIN_SIDE:
        raise ConfigError(f"--width and --height must be >= {MIN_SIDE}, got {args.width}x{args.height}")
    if args.seed < 0:
        raise ConfigError(f"--seed must be non-negative, got {args.seed}")
    style = make_style(args.style, args.seed)
    dataset = make_dataset(style, args.n_train, args.n_test, args.width, args.height)
    manifest = save_dataset(dataset, out_dir)
    print(f"Wrote {len(dataset.train)} train / {len(dataset.test)} test pairs, manifest {manifest}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    values = load_config_file(args.config, CONFIG_KEYS) if args.config else {}
    backbone, train_cfg = parse_run_config(values, args.seed)
    data_dir = Path(args.data or config.DATA_DIR)
    if not train_cfg.train_names:
        train_cfg = train_cfg.model_copy(update={"train_names": tuple(read_split(data_dir, "train"))})
    if not train_cfg.test_names and (data_dir / "test.txt").exists():
        train_cfg = train_cfg.model_copy(update={"test_names": tuple(read_split(data_dir, "test"))})
    log_path = Path(args.log) if args.log else Path(f"{args.checkpoint}.log")

    echo_config(
        "train",
        {
            **backbone.model_dump(),
            **train_cfg.model_dump(),
            "data": data_dir,
            "checkpoint": args.checkpoint,
            "log": log_path,
            "parameter_count": parameter_count(backbone),
        },
    )
    pairs = load_pairs(data_dir, list(train_cfg.train_names))
    result = train(pairs, train_cfg, backbone, checkpoint_path=args.checkpoint, log_path=log_path)
    if result.epoch_losses:
        print(f"Final epoch mean loss {result.epoch_losses[-1]:.6f}")
    if train_cfg.test_names:
        report = evaluate(result.net, load_pairs(data_dir, list(train_cfg.test_names)), workers=config.EVAL_WORKERS)
        print(f"Test mean L2 {report.mean_l2:.4f} (baseline {report.baseline_mean_l2:.4f})")
    print(f"Checkpoint written to {args.checkpoint}")
    return EXIT_OK


def cmd_apply(args: argparse.Namespace) -> int:
    echo_config("apply", {"checkpoint": args.checkpoint, "input": args.input, "output": args.output})
    net = CheckpointManager().restore_checkpoint(args.checkpoint)
    result = forward(net, srgb_to_lab(read_png(args.input)))
    write_png(lab_to_srgb(result.enhanced), args.output)
    print(f"Wrote {args.output}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    data_dir = Path(args.data or config.DATA_DIR)
    report_path = Path(args.report) if args.report else data_dir / f"{args.split}_report.tsv"
    workers = args.workers or config.EVAL_WORKERS
    echo_config(
        "eval",
        {
            "checkpoint": args.checkpoint,
            "data": data_dir,
            "split": args.split,
            "report": report_path,
            "workers": workers,
        },
    )
    net = CheckpointManager().restore_checkpoint(args.checkpoint)
    report = evaluate(net, load_dataset(data_dir, args.split), workers=workers)

    lines = ["name\tbaseline\tmethod"]
    lines += [f"{name}\t{baseline!r}\t{method!r}" for name, baseline, method in report.rows()]
    try:
        report_path.parent.mkdir(parents=True, exist_ok=True)
        report_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise DatasetError(f"cannot write report ({e})", str(report_path)) from e

    print(f"{'name':<16}{'baseline':>12}{'method':>12}")
    for name, baseline, method in report.rows():
        print(f"{name:<16}{baseline:>12.4f}{method:>12.4f}")
    print(f"{'mean':<16}{report.baseline_mean_l2:>12.4f}{report.mean_l2:>12.4f}")
    print(f"Report written to {report_path}")
    return EXIT_OK


def cmd_selfcheck(args: argparse.Namespace) -> int:
    echo_config("selfcheck", {})
    results = run_selfcheck()
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<22} {r.seconds:6.2f}s  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    print(f"\n{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stylize", description="Semantics-aware photo stylization with per-pixel color transforms"
    )
    parser.add_argument("--log-level", default=None, help="Logging level (default: STYLIZE_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="Generate a synthetic style dataset")
    gen.add_argument("--style", choices=STYLE_NAMES, default="global")
    gen.add_argument("--seed", type=int, default=config.DEFAULT_SEED)
    gen.add_argument("--n-train", type=int, default=20)
    gen.add_argument("--n-test", type=int, default=10)
    gen.add_argument("--width", type=int, default=64)
    gen.add_argument("--height", type=int, default=64)
    gen.add_argument("--out", default=None, help="Output directory (default: STYLIZE_DATA_DIR)")
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="Train a network on a dataset")
    tr.add_argument("--data", default=None, help="Dataset directory (default: STYLIZE_DATA_DIR)")
    tr.add_argument("--config", default=None, help="Flat key = value config file")
    tr.add_argument("--checkpoint", required=True, help="Checkpoint output path")
    tr.add_argument("--log", default=None, help="Epoch log path (default: <checkpoint>.log)")
    tr.add_argument("--seed", type=int, default=None, help="Overrides the config file seed")
    tr.set_defaults(func=cmd_train)

    ap = sub.add_parser("apply", help="Stylize one PNG")
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--input", required=True)
    ap.add_argument("--output", required=True)
    ap.set_defaults(func=cmd_apply)

    ev = sub.add_parser("eval", help="Report mean per-pixel L2 errors on a split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", default=None, help="Dataset directory (default: STYLIZE_DATA_DIR)")
    ev.add_argument("--split", choices=("train", "test"), default="test")
    ev.add_argument("--report", default=None, help="Report path (default: <data>/<split>_report.tsv)")
    ev.add_argument("--workers", type=int, default=None, help="Evaluation threads")
    ev.set_defaults(func=cmd_eval)

    sc = sub.add_parser("selfcheck", help="Run the fast invariant suite")
    sc.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    errors = config.validate()
    if errors:
        print("Configuration errors found:", file=sys.stderr)
        for error in errors:
            print(f"  - {error}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        setup_logging(args.log_level)
    except ValueError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        return args.func(args)
    except ConfigError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"Checkpoint error: {e}", file=sys.stderr)
        return EXIT_IO if isinstance(e.__cause__, OSError) else EXIT_INVALID_INPUT
    except DatasetError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ShapeError as e:
        print(f"Invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID_INPUT
    except (StylizeError, ValueError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except Exception:
        logger.exception("Unexpected failure in %s", args.command)
        return EXIT_ERROR
