"""Pydantic schemas for engine configuration and reports."""
from pydantic import BaseModel, Field, field_validator, model_validator, computed_field, ConfigDict
from typing import Literal, Optional, Union
import enum

from src.config import settings


class Activation(str, enum.Enum):
    """Nonlinearity applied at a junction between two linear layers."""

    RELU = "relu"
    NONE = "none"


class LossKind(str, enum.Enum):
    """Training objective on the network output."""

    MSE = "mse"
    SOFTMAX_CE = "softmax-cross-entropy"


class ThresholdMode(str, enum.Enum):
    """Interpretation of the outlier fraction when deriving thresholds."""

    PERCENTILE = "percentile"
    RANGE = "range"


class WeightRounding(str, enum.Enum):
    """How updated weights are rounded back onto the integer grid."""

    NEAREST = "nearest"
    STOCHASTIC = "stochastic"


class OptimizerKind(str, enum.Enum):
    """Training pipelines the trainer can run."""

    QFT_LION = "qft-lion"
    FP_LION = "fp-lion"
    FP_ADAM = "fp-adam"


class ProfileMethod(str, enum.Enum):
    """Methods covered by the analytic memory profile."""

    ADAM = "adam"
    ADAM_MIXED = "adam-mixed"
    BITSANDBYTES = "bitsandbytes"
    LION = "lion"
    QFT = "qft"


class QuantConfig(BaseModel):
    """Quantizer selection for weights and transient states."""

    model_config = ConfigDict(extra="forbid")

    bit_width: int = Field(default=settings.default_bit_width, ge=2, le=8)
    outlier_fraction: float = Field(default=settings.default_outlier_fraction, ge=0.0, lt=0.5)
    threshold_mode: ThresholdMode = Field(default=ThresholdMode(settings.threshold_mode))
    channel_wise: bool = Field(default=True, description="One (scale, zero-point) pair per output row")
    weight_rounding: WeightRounding = Field(
        default=WeightRounding.NEAREST,
        description="Rounding of requantized weights after an optimizer step"
    )
    pass_through: bool = Field(
        default=False,
        description="Identity quantizers; isolates algorithmic error from quantization error"
    )


class ModelConfig(BaseModel):
    """Architecture of a bias-free MLP."""

    model_config = ConfigDict(
        extra="forbid",
        json_schema_extra={
            "example": {
                "layer_dims": [32, 64, 64, 1],
                "activation": "relu",
                "loss": "mse",
                "seed": 0,
            }
        }
    )

    layer_dims: list[int] = Field(..., min_length=2, description="Widths from input to output")
    activation: Union[Activation, list[Activation]] = Field(
        default=Activation.RELU,
        description="One activation for every junction, or one per junction"
    )
    loss: LossKind = Field(default=LossKind.MSE)
    seed: int = Field(default=0, ge=0)
    dtype: Literal["float32", "float64"] = Field(
        default="float32",
        description="Compute precision; float64 is intended for gradient checks"
    )
    init_outlier_fraction: float = Field(
        default=0.0,
        ge=0.0,
        lt=0.5,
        description="Fraction of initial weights replaced by synthetic outliers"
    )
    init_outlier_scale: float = Field(
        default=100.0,
        gt=0.0,
        description="Synthetic outliers are drawn at this multiple of the init bound"
    )

    @field_validator("layer_dims", mode="before")
    @classmethod
    def split_dims(cls, v):
        """Accept ``"32,64,1"`` as well as a list."""
        if isinstance(v, str):
            return [part.strip() for part in v.split(",") if part.strip()]
        return v

    @field_validator("layer_dims")
    @classmethod
    def positive_dims(cls, v: list[int]) -> list[int]:
        if any(d < 1 for d in v):
            raise ValueError("layer_dims must all be positive")
        return v

    @field_validator("activation", mode="before")
    @classmethod
    def split_activations(cls, v):
        if isinstance(v, str) and "," in v:
            return [part.strip() for part in v.split(",")]
        return v

    @model_validator(mode="after")
    def activation_per_junction(self) -> "ModelConfig":
        if isinstance(self.activation, list) and len(self.activation) != len(self.layer_dims) - 2:
            raise ValueError(
                f"Expected {len(self.layer_dims) - 2} activations (one per junction), "
                f"got {len(self.activation)}"
            )
        return self

    def junction_activations(self) -> list[Activation]:
        """Activation applied after each layer except the last."""
        junctions = len(self.layer_dims) - 2
        if isinstance(self.activation, list):
            return list(self.activation)
        return [self.activation] * junctions

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1


class LearningRateSchedule(BaseModel):
    """Base learning rate eta and its decay over a run."""

    model_config = ConfigDict(extra="forbid")

    lr: float = Field(default=1e-3, gt=0.0)
    schedule: Literal["constant", "linear"] = Field(default="constant")
    final_lr_ratio: float = Field(
        default=0.0,
        ge=0.0,
        le=1.0,
        description="Learning rate at the last step as a fraction of lr (linear schedule)"
    )

    def lr_at(self, step: int, total_steps: int) -> float:
        """Learning rate for a 0-based step index."""
        if self.schedule == "constant" or total_steps <= 1:
            return self.lr
        progress = min(step, total_steps - 1) / (total_steps - 1)
        return self.lr * (1.0 - (1.0 - self.final_lr_ratio) * progress)


class LionHyper(LearningRateSchedule):
    """Lion hyperparameters (beta1, beta2, weight decay lambda) plus the learning rate schedule."""

    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.99, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=0.0, ge=0.0)


class AdamHyper(LearningRateSchedule):
    """Adam hyperparameters for the fp32 baseline."""

    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    weight_decay: float = Field(default=0.0, ge=0.0)


class OptimizerConfig(BaseModel):
    """Which pipeline to train with, plus its hyperparameters."""

    model_config = ConfigDict(extra="forbid")

    kind: OptimizerKind = Field(default=OptimizerKind.QFT_LION)
    lion: LionHyper = Field(default_factory=LionHyper)
    adam: AdamHyper = Field(default_factory=AdamHyper)

    def lr_at(self, step: int, total_steps: int) -> float:
        """Scheduled learning rate of the selected optimizer."""
        hyper = self.adam if self.kind == OptimizerKind.FP_ADAM else self.lion
        return hyper.lr_at(step, total_steps)


class TrainConfig(BaseModel):
    """Complete description of a training run."""

    model_config = ConfigDict(
        extra="forbid",
        json_schema_extra={
            "example": {
                "model": {"layer_dims": [8, 32, 1]},
                "optimizer": {"kind": "qft-lion", "lion": {"lr": 0.005}},
                "batch_size": 32,
                "micro_batches": 1,
                "epochs": 2,
                "steps_per_epoch": 100,
                "dataset": "synthetic:reg-8-1-n1024",
            }
        }
    )

    model: ModelConfig
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    batch_size: int = Field(default=32, ge=1)
    micro_batches: int = Field(default=1, ge=1)
    epochs: int = Field(default=1, ge=1)
    steps_per_epoch: int = Field(default=100, ge=0)
    outlier_fraction: float = Field(default=settings.default_outlier_fraction, ge=0.0, lt=0.5)
    bit_width: int = Field(default=settings.default_bit_width, ge=2, le=8)
    threshold_mode: ThresholdMode = Field(default=ThresholdMode(settings.threshold_mode))
    weight_rounding: WeightRounding = Field(default=WeightRounding.NEAREST)
    dataset: str = Field(default="synthetic:reg-8-1-n1024", min_length=1)
    seed: int = Field(default=0, ge=0)
    output_dir: str = Field(default=settings.output_dir)

    @model_validator(mode="after")
    def micro_batches_divide_batch(self) -> "TrainConfig":
        if self.batch_size % self.micro_batches != 0:
            raise ValueError(
                f"batch_size {self.batch_size} is not divisible by micro_batches {self.micro_batches}"
            )
        return self

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def quant_config(self) -> QuantConfig:
        """Quantizers for this run; the fp baselines use pass-through storage."""
        return QuantConfig(
            bit_width=self.bit_width,
            outlier_fraction=self.outlier_fraction,
            threshold_mode=self.threshold_mode,
            weight_rounding=self.weight_rounding,
            pass_through=self.optimizer.kind != OptimizerKind.QFT_LION,
        )


class ProfileConfig(BaseModel):
    """Knobs of the analytic memory model."""

    model_config = ConfigDict(extra="forbid")

    param_count: int = Field(..., ge=1, description="Number of trainable parameters N")
    fp_bytes: int = Field(default=4, ge=1)
    half_bytes: int = Field(default=2, ge=1)
    int_bytes: int = Field(default=1, ge=1)
    outlier_fraction: float = Field(default=settings.default_outlier_fraction, ge=0.0, lt=1.0)
    unquantized_fraction: float = Field(
        default=0.0,
        ge=0.0,
        lt=1.0,
        description="Share of every state kept in floating point"
    )
    channel_size: int = Field(default=4096, ge=1, description="Elements per quantization channel")
    sparse_index_bytes: int = Field(default=4, ge=0)
    channel_param_bytes: int = Field(default=8, ge=0, description="Scale plus zero-point per channel")
    activation_bytes: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def fractions_leave_quantized_part(self) -> "ProfileConfig":
        if self.outlier_fraction + self.unquantized_fraction >= 1.0:
            raise ValueError("outlier_fraction + unquantized_fraction must be < 1")
        return self


class MemoryProfile(BaseModel):
    """Bytes per model-state category for one method."""

    method: str
    weights_bytes: int = Field(default=0, ge=0)
    gradients_bytes: int = Field(default=0, ge=0)
    weight_copies_bytes: int = Field(default=0, ge=0)
    momentum_bytes: int = Field(default=0, ge=0)
    variances_bytes: int = Field(default=0, ge=0)
    activation_bytes: int = Field(default=0, ge=0)
    ratio_vs_adam: Optional[float] = Field(
        default=None,
        description="Model-state bytes relative to fp32 Adam for the same parameter count"
    )

    @computed_field
    @property
    def model_state_bytes(self) -> int:
        return (
            self.weights_bytes + self.gradients_bytes + self.weight_copies_bytes
            + self.momentum_bytes + self.variances_bytes
        )

    @computed_field
    @property
    def total_bytes(self) -> int:
        return self.model_state_bytes + self.activation_bytes

    def components(self) -> dict[str, int]:
        """Component name to bytes, in report order."""
        return {
            "weights": self.weights_bytes,
            "gradients": self.gradients_bytes,
            "weight_copies": self.weight_copies_bytes,
            "momentum": self.momentum_bytes,
            "variances": self.variances_bytes,
            "activation": self.activation_bytes,
        }


class SweepRow(BaseModel):
    """One row of a threshold sweep."""

    fraction: float
    bytes: int
    l2: float


class DistributionStats(BaseModel):
    """Summary of a state tensor's value distribution."""

    count: int
    min: float
    max: float
    mean: float
    stdev: float
    range_ratio: float = Field(..., description="Full range over the central 99% range")
    outlier_count: int = Field(..., description="Entries beyond k standard deviations of the mean")
    k: float
