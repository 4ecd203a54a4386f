"""Command-line entry point.

Usage::

    python -m src.main train --config example_train.conf
    python -m src.main profile --params 6738000000 --method qft
    python -m src.main sweep --weights synthetic --fractions 0,0.0045,0.01,0.03,0.05
    python -m src.main compare --config example_train.conf
    python -m src.main stats --tensor runs/final.qftc

Reports go to stdout, logs to stderr. Any handled error exits with status 1
and a one-line message on stderr.
"""
import argparse
import re
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from src import __version__
from src.config import settings, configure_logging, get_logger
from src.engine.profiler import (
    ProfileError,
    analytic_profile,
    distribution_stats,
    format_profile,
    format_stats,
    heavy_tailed_tensor,
    profiles_to_csv,
    state_distribution_report,
    sweep_to_csv,
    threshold_sweep,
)
from src.engine.quantizers import QuantizationError
from src.engine.tensor import Tensor, TensorShapeError
from src.schemas import ProfileConfig, ProfileMethod, ThresholdMode
from src.training.checkpoint import CheckpointError, load_checkpoint
from src.training.config_file import ConfigFileError, load_train_config
from src.training.trainer import TrainingError, compare_runs, train

logger = get_logger(__name__)

DEFAULT_FRACTIONS = "0,0.0045,0.01,0.03,0.05"
SYNTHETIC_SOURCE = re.compile(r"^synthetic(?::(\d+)x(\d+))?$")

HANDLED_ERRORS = (
    CheckpointError,
    ConfigFileError,
    ProfileError,
    QuantizationError,
    TensorShapeError,
    TrainingError,
    ValueError,
)


def _fractions(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid fraction list: {text}")


def _load_tensors(source: str, layer: Optional[int] = None, seed: int = 0) -> Dict[str, Tensor]:
    """Named tensors from ``synthetic[:<rows>x<cols>]`` or a checkpoint file.

    For a checkpoint, ``layer`` selects one layer's weight (1-based); all
    layers are returned when it is None.
    """
    match = SYNTHETIC_SOURCE.match(source)
    if match:
        rows, cols = (int(g) for g in match.groups()) if match.group(1) else (64, 1024)
        return {"synthetic": heavy_tailed_tensor(rows, cols, seed=seed)}

    model = load_checkpoint(Path(source)).model
    if layer is not None:
        if not 1 <= layer <= model.num_layers:
            raise ValueError(f"--layer must be in [1, {model.num_layers}], got {layer}")
        return {f"layer{layer}.weight": model.layers[layer - 1].weight.reconstruct()}
    return {f"layer{l.layer_index}.weight": l.weight.reconstruct() for l in model.layers}


def cmd_train(args: argparse.Namespace) -> int:
    config = load_train_config(args.config)
    result = train(config, args.output)
    print(f"run_id={result.record.id}")
    print(f"status={result.record.status.value}")
    print(f"optimizer={config.optimizer.kind.value}")
    print(f"steps={result.record.steps_completed}")
    print(f"final_loss={result.final_loss!r}")
    print(f"state_bytes={result.profile.model_state_bytes}")
    print(f"checkpoint={result.checkpoint_path}")
    print(f"metrics={result.metrics_path}")
    return 0


def cmd_profile(args: argparse.Namespace) -> int:
    cfg = ProfileConfig(
        param_count=args.params,
        outlier_fraction=args.outlier_fraction,
        unquantized_fraction=args.unquantized_fraction,
        channel_size=args.channel_size,
    )
    methods = list(ProfileMethod) if args.method == "all" else [ProfileMethod(args.method)]
    profiles = [analytic_profile(cfg, method) for method in methods]
    if args.format == "csv":
        sys.stdout.write(profiles_to_csv(profiles))
    else:
        print("\n\n".join(format_profile(profile, args.units) for profile in profiles))
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    tensors = _load_tensors(args.weights, args.layer, args.seed)
    # last layer by default
    name, w = list(tensors.items())[-1]
    rows = threshold_sweep(w, args.fractions, bit_width=args.bit_width, threshold_mode=args.threshold_mode)
    logger.info("Sweep completed", tensor=name, points=len(rows))
    sys.stdout.write(sweep_to_csv(rows))
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    config = load_train_config(args.config)
    report = compare_runs(config, args.output)
    print(report.summary(args.units))
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    source = args.tensor
    if SYNTHETIC_SOURCE.match(source) or args.layer is not None:
        for name, tensor in _load_tensors(source, args.layer, args.seed).items():
            print(format_stats(name, distribution_stats(tensor, args.k)))
        return 0
    checkpoint = load_checkpoint(Path(source))
    for name, stats in state_distribution_report(checkpoint.model, checkpoint.state, args.k).items():
        print(format_stats(name, stats))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qft",
        description="Fully quantized training of MLPs with integer model states",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=settings.log_level, help="DEBUG, INFO, WARNING or ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Run one training job from a config file")
    p.add_argument("--config", required=True, help="key=value or .toml config file")
    p.add_argument("--output", default=None, help="Artifact directory (overrides output_dir)")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("profile", help="Analytic model-state memory of a training method")
    p.add_argument("--params", type=int, required=True, help="Number of parameters N")
    p.add_argument("--method", default="qft", choices=[m.value for m in ProfileMethod] + ["all"])
    p.add_argument("--outlier-fraction", type=float, default=settings.default_outlier_fraction)
    p.add_argument("--unquantized-fraction", type=float, default=0.0)
    p.add_argument("--channel-size", type=int, default=4096, help="Elements per quantization channel")
    p.add_argument("--units", default="gib", choices=["gib", "gb"])
    p.add_argument("--format", default="text", choices=["text", "csv"])
    p.set_defaults(handler=cmd_profile)

    p = sub.add_parser("sweep", help="Bytes and L2 error of dense-and-sparse decomposition per outlier fraction")
    p.add_argument("--weights", default="synthetic", help="Checkpoint path or synthetic[:<rows>x<cols>]")
    p.add_argument("--fractions", type=_fractions, default=_fractions(DEFAULT_FRACTIONS))
    p.add_argument("--layer", type=int, default=None, help="Checkpoint layer (default: last layer)")
    p.add_argument("--bit-width", type=int, default=settings.default_bit_width)
    p.add_argument("--threshold-mode", default=settings.threshold_mode, choices=[m.value for m in ThresholdMode])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("compare", help="Train qft-lion, fp-lion and fp-adam side by side")
    p.add_argument("--config", required=True)
    p.add_argument("--output", default=None)
    p.add_argument("--units", default="gib", choices=["gib", "gb"])
    p.set_defaults(handler=cmd_compare)

    p = sub.add_parser("stats", help="Distribution statistics of stored tensors")
    p.add_argument("--tensor", default="synthetic", help="Checkpoint path or synthetic[:<rows>x<cols>]")
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--k", type=float, default=settings.distribution_outlier_k)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_stats)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run the subcommand and map errors to exit codes."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.log_level.upper() != settings.log_level.upper():
        configure_logging(args.log_level, settings.log_format)
    try:
        return args.handler(args)
    except HANDLED_ERRORS as e:
        logger.error("Command failed", command=args.command, error=str(e))
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
