"""Training loop, threshold refresh and comparison runs.

One step is: forward per micro-batch, loss gradient, backward with gradient
accumulation into the stack, then the optimizer step of the configured
pipeline. Outlier thresholds are recomputed once at the start of every epoch
after the first; within an epoch the dense weight parameters follow the
cached thresholds.
"""
import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.config import get_logger
from src.engine.gradflow import GradientStack, backward
from src.engine.network import Model, build_model, build_reference_model, forward, loss_and_grad
from src.engine.optimizer import (
    adam_step_reference,
    init_adam_state,
    init_lion_state,
    init_reference_lion_state,
    lion_step_quantized,
    lion_step_reference,
    pop_gradients,
)
from src.engine.profiler import OptimizerState, format_profile, measured_profile, profiles_to_csv
from src.engine.quantizers import DenseSparseQuantizer, FloatWeight
from src.engine.tensor import Tensor
from src.engine.tracking import memory_tracker, WEIGHT
from src.schemas import MemoryProfile, OptimizerKind, TrainConfig
from src.training.checkpoint import CheckpointError, save_checkpoint
from src.training.dataset import BatchLoader, DatasetError, ingest_dataset
from src.training.metrics import RunRecord, StepMetrics

logger = get_logger(__name__)

METRICS_FILE = "metrics.csv"
FINAL_CHECKPOINT = "final.qftc"
RUN_FILE = "run.json"


class TrainingError(RuntimeError):
    """Raised when a training run aborts; carries the step and epoch it failed at."""

    def __init__(self, message: str, step: Optional[int] = None, epoch: Optional[int] = None):
        self.step = step
        self.epoch = epoch
        context = f" (step {step}, epoch {epoch})" if step is not None else ""
        super().__init__(f"{message}{context}")


@dataclass
class RunResult:
    """Artifacts of a finished run."""

    record: RunRecord
    model: Model
    state: OptimizerState
    output_dir: Path
    checkpoint_path: Path
    metrics_path: Path
    profile: MemoryProfile

    @property
    def final_loss(self) -> Optional[float]:
        return self.record.final_loss


@dataclass
class ComparisonReport:
    """Side-by-side results of the three training pipelines."""

    results: Dict[str, RunResult] = field(default_factory=dict)

    @property
    def final_losses(self) -> Dict[str, Optional[float]]:
        return {kind: result.final_loss for kind, result in self.results.items()}

    @property
    def profiles(self) -> List[MemoryProfile]:
        return [result.profile for result in self.results.values()]

    def loss_curves_csv(self) -> str:
        """CSV with a ``step`` column and one loss column per method."""
        kinds = list(self.results)
        curves = [[m.loss for m in self.results[k].record.metrics] for k in kinds]
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["step", *kinds])
        for step in range(max((len(c) for c in curves), default=0)):
            writer.writerow([step, *(repr(c[step]) if step < len(c) else "" for c in curves)])
        return buffer.getvalue()

    def summary(self, units: str = "gib") -> str:
        lines = []
        for kind, result in self.results.items():
            lines.append(f"optimizer={kind} final_loss={result.final_loss!r} "
                         f"state_bytes={result.profile.model_state_bytes}")
        for profile in self.profiles:
            lines.append(format_profile(profile, units))
        return "\n".join(lines)


def init_run(config: TrainConfig) -> Tuple[Model, OptimizerState]:
    """Model and zero optimizer state for the configured pipeline."""
    kind = config.optimizer.kind
    if kind == OptimizerKind.QFT_LION:
        model = build_model(config.model, config.quant_config())
        return model, init_lion_state(model)
    model = build_reference_model(config.model)
    if kind == OptimizerKind.FP_LION:
        return model, init_reference_lion_state(model)
    return model, init_adam_state(model)


def refresh_thresholds(model: Model, outlier_fraction: Optional[float] = None) -> None:
    """Recompute every layer's outlier thresholds and re-decompose its weight.

    The current weight is reconstructed, thresholds are recomputed at the
    outlier fraction and the weight is decomposed again, so the dense scale
    follows the new thresholds. Floating-point weights are left untouched.

    Args:
        model: Model to refresh in place
        outlier_fraction: Fraction p (defaults to the model's configured value)
    """
    if model.pass_through:
        return
    quantizer = model.weight_quantizer
    if outlier_fraction is not None and outlier_fraction != quantizer.outlier_fraction:
        quantizer = DenseSparseQuantizer(
            bit_width=quantizer.bit_width,
            outlier_fraction=outlier_fraction,
            threshold_mode=quantizer.threshold_mode,
            channel_wise=quantizer.channel_wise,
        )
    for layer in model.layers:
        if isinstance(layer.weight, FloatWeight):
            continue
        w = layer.weight.reconstruct()
        with memory_tracker.hold(WEIGHT, w.nbytes):
            layer.weight = quantizer.decompose(w, quantizer.thresholds(w))
        del w
    logger.debug("Thresholds refreshed", layers=model.num_layers, outlier_fraction=quantizer.outlier_fraction)


def compute_gradients(
    model: Model,
    stack: GradientStack,
    x: Tensor,
    y: Tensor,
    micro_batches: int = 1,
) -> Tuple[float, float]:
    """Forward and backward over ``micro_batches`` equal slices of a batch.

    Each micro-batch gradient is scaled by 1/micro_batches and accumulated
    into the stack, so the stack ends up holding the gradient of the mean
    loss over the whole batch.

    Returns:
        tuple: (mean loss over the batch, L2 norm of the accumulated gradients before quantization)
    """
    loss_total = 0.0
    squared_norm = 0.0
    scale = model.dtype(1.0 / micro_batches)
    for xm, ym in zip(np.array_split(x, micro_batches), np.array_split(y, micro_batches)):
        output, saved = forward(model, xm)
        loss, g_o = loss_and_grad(output, ym, model.config.loss)
        if micro_batches > 1:
            g_o = g_o * scale
        loss_total += loss / micro_batches
        squared_norm = backward(saved, g_o, stack, model.state_quantizer)
    return loss_total, math.sqrt(squared_norm)


def optimizer_step(
    model: Model,
    state: OptimizerState,
    stack: GradientStack,
    config: TrainConfig,
    lr: float,
) -> None:
    """Apply the configured optimizer at learning rate ``lr``, consuming the gradient stack."""
    kind = config.optimizer.kind
    if kind == OptimizerKind.QFT_LION:
        lion_step_quantized(model, state, stack, config.optimizer.lion, lr)
    elif kind == OptimizerKind.FP_LION:
        lion_step_reference(model, state, pop_gradients(stack, model), config.optimizer.lion, lr)
    else:
        adam_step_reference(model, state, pop_gradients(stack, model), config.optimizer.adam, lr)


def _checkpoint_path(output_dir: Path, epoch: int) -> Path:
    return output_dir / f"epoch-{epoch}.qftc"


def train(config: TrainConfig, output_dir: Optional[str] = None) -> RunResult:
    """Run a full training job and write its artifacts.

    Writes ``metrics.csv``, one checkpoint per finished epoch, ``final.qftc``
    and ``run.json`` into the output directory.

    Args:
        config: Validated training configuration
        output_dir: Artifact directory (defaults to config.output_dir)

    Returns:
        RunResult: Record, final model and state, artifact paths and the last measured profile

    Raises:
        TrainingError: If any step fails; the cause is chained
    """
    out = Path(output_dir or config.output_dir)
    record = RunRecord(config)
    record.mark_in_progress()
    kind = config.optimizer.kind.value
    logger.info("Training started", optimizer=kind, steps=config.total_steps, output_dir=str(out))

    step, epoch = 0, 0
    try:
        dataset = ingest_dataset(
            config.dataset,
            input_dim=config.model.layer_dims[0],
            target_dim=config.model.layer_dims[-1],
            seed=config.seed,
            dtype=config.model.dtype,
        )
        model, state = init_run(config)
        stack = GradientStack()
        profile = measured_profile(model, state, stack)
        loader = BatchLoader(dataset, config.batch_size, seed=config.seed)

        for step, (x, y) in enumerate(loader.batches(config.total_steps)):
            epoch = step // config.steps_per_epoch
            if epoch > 0 and step % config.steps_per_epoch == 0:
                refresh_thresholds(model)

            lr = config.optimizer.lr_at(step, config.total_steps)
            loss, grad_norm = compute_gradients(model, stack, x, y, config.micro_batches)
            if not math.isfinite(loss) or not math.isfinite(grad_norm):
                raise TrainingError(f"Non-finite loss {loss} or gradient norm {grad_norm}", step, epoch)
            profile = measured_profile(model, state, stack)
            optimizer_step(model, state, stack, config, lr)

            record.append(StepMetrics(
                step=step, epoch=epoch, loss=loss, grad_norm=grad_norm, state_bytes=profile.model_state_bytes,
            ))
            logger.debug("Step", step=step, epoch=epoch, loss=loss, grad_norm=grad_norm, lr=lr)

            if (step + 1) % config.steps_per_epoch == 0:
                save_checkpoint(model, state, _checkpoint_path(out, epoch), step + 1, kind)

        checkpoint_path = save_checkpoint(model, state, out / FINAL_CHECKPOINT, config.total_steps, kind)
        metrics_path = record.write_metrics(out / METRICS_FILE)
    except TrainingError as e:
        record.mark_failed(str(e))
        logger.error("Training failed", optimizer=kind, error=str(e))
        raise
    except (ValueError, CheckpointError, OSError) as e:
        record.mark_failed(str(e))
        logger.error("Training failed", optimizer=kind, step=step, epoch=epoch, error=str(e))
        if isinstance(e, DatasetError):
            raise TrainingError(f"Dataset error: {e}") from e
        raise TrainingError(str(e), step, epoch) from e

    record.mark_completed()
    (out / RUN_FILE).write_text(json.dumps(record.to_dict(), indent=2), encoding="utf-8")
    logger.info("Training completed", optimizer=kind, steps=record.steps_completed, final_loss=record.final_loss)
    return RunResult(
        record=record,
        model=model,
        state=state,
        output_dir=out,
        checkpoint_path=checkpoint_path,
        metrics_path=metrics_path,
        profile=profile,
    )


def compare_runs(config: TrainConfig, output_dir: Optional[str] = None) -> ComparisonReport:
    """Train qft-lion, fp-lion and fp-adam from the same seed and dataset.

    Each run writes into ``<output_dir>/<optimizer>``; the loss curves and
    measured profiles are written to ``loss_curves.csv`` and ``profiles.csv``.
    """
    out = Path(output_dir or config.output_dir)
    report = ComparisonReport()
    for kind in OptimizerKind:
        optimizer = config.optimizer.model_copy(update={"kind": kind})
        run_config = config.model_copy(update={"optimizer": optimizer})
        report.results[kind.value] = train(run_config, str(out / kind.value))

    out.mkdir(parents=True, exist_ok=True)
    (out / "loss_curves.csv").write_text(report.loss_curves_csv(), encoding="utf-8")
    (out / "profiles.csv").write_text(profiles_to_csv(report.profiles), encoding="utf-8")
    logger.info("Comparison completed", final_losses=report.final_losses)
    return report
