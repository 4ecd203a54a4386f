"""Run records and per-step metrics."""
import csv
import enum
import io
import math
import uuid
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

from pydantic import BaseModel, Field, field_validator

from src.schemas import TrainConfig

METRICS_HEADER = ["step", "epoch", "loss", "grad_norm", "state_bytes"]


class RunStatus(str, enum.Enum):
    """Enumeration of possible training run statuses."""

    PENDING = "pending"
    IN_PROGRESS = "in_progress"
    COMPLETED = "completed"
    FAILED = "failed"


class StepMetrics(BaseModel):
    """Metrics of one optimizer step."""

    step: int = Field(..., ge=0)
    epoch: int = Field(..., ge=0)
    loss: float
    grad_norm: float = Field(..., ge=0.0, description="L2 norm of the gradients before quantization")
    state_bytes: int = Field(..., ge=0, description="Measured model-state bytes before the update")

    @field_validator("loss", "grad_norm")
    @classmethod
    def finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("metric values must be finite")
        return v


class RunRecord:
    """Lifecycle and metrics of one training run.

    Attributes:
        id: Unique identifier (UUID)
        config: Configuration the run was started with
        status: Current run status (pending/in_progress/completed/failed)
        metrics: One StepMetrics per completed step, in step order
        error_message: Error details if the run failed (optional)
        created_at: Timestamp when the record was created
        completed_at: Timestamp when the run finished (optional)
    """

    def __init__(self, config: TrainConfig):
        self.id = uuid.uuid4()
        self.config = config
        self.status = RunStatus.PENDING
        self.metrics: List[StepMetrics] = []
        self.error_message: Optional[str] = None
        self.created_at = datetime.now(timezone.utc)
        self.completed_at: Optional[datetime] = None

    def __repr__(self) -> str:
        return (
            f"<RunRecord(id={self.id}, kind={self.config.optimizer.kind.value}, "
            f"status={self.status.value}, steps={len(self.metrics)})>"
        )

    @property
    def steps_completed(self) -> int:
        return len(self.metrics)

    @property
    def final_loss(self) -> Optional[float]:
        return self.metrics[-1].loss if self.metrics else None

    def append(self, metrics: StepMetrics) -> None:
        """Add a step's metrics; step indices must increase.

        Raises:
            ValueError: If the step index does not follow the previous one
        """
        if self.metrics and metrics.step <= self.metrics[-1].step:
            raise ValueError(f"step {metrics.step} does not follow step {self.metrics[-1].step}")
        self.metrics.append(metrics)

    def to_dict(self) -> dict:
        """Convert the record to a dictionary for JSON serialization."""
        return {
            "id": str(self.id),
            "optimizer": self.config.optimizer.kind.value,
            "status": self.status.value,
            "steps_completed": self.steps_completed,
            "final_loss": self.final_loss,
            "error_message": self.error_message,
            "created_at": self.created_at.isoformat(),
            "completed_at": self.completed_at.isoformat() if self.completed_at else None,
            "config": self.config.model_dump(mode="json"),
        }

    def mark_in_progress(self) -> None:
        """Mark run as in progress."""
        self.status = RunStatus.IN_PROGRESS

    def mark_completed(self) -> None:
        """Mark run as completed."""
        self.status = RunStatus.COMPLETED
        self.completed_at = datetime.now(timezone.utc)

    def mark_failed(self, error_message: str) -> None:
        """Mark run as failed with error message.

        Args:
            error_message: Description of the error
        """
        self.status = RunStatus.FAILED
        self.error_message = error_message
        self.completed_at = datetime.now(timezone.utc)

    def metrics_csv(self) -> str:
        """Metrics as CSV text with header ``step,epoch,loss,grad_norm,state_bytes``."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for m in self.metrics:
            writer.writerow([m.step, m.epoch, repr(m.loss), repr(m.grad_norm), m.state_bytes])
        return buffer.getvalue()

    def write_metrics(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.metrics_csv(), encoding="utf-8")
        return path
