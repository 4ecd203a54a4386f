"""Bookkeeping of transiently materialized floating-point states.

Forward, backward and optimizer steps dequantize one layer at a time. Each
materialization is registered here for as long as it is alive, so tests and
the profiler can check that no full-precision weight outlives a step and that
at most one layer's worth is live at any moment.
"""
from collections import defaultdict
from contextlib import contextmanager
from typing import Iterator, Optional

from src.config import get_logger

logger = get_logger(__name__)

WEIGHT = "weight"
GRADIENT = "gradient"
MOMENTUM = "momentum"


class MemoryTracker:
    """Live and high-water bytes per state kind.

    Attributes:
        live: Bytes currently materialized, per kind
        peak: Largest value ``live`` reached since the last reset, per kind
    """

    def __init__(self):
        self.live: dict[str, int] = defaultdict(int)
        self.peak: dict[str, int] = defaultdict(int)

    def acquire(self, kind: str, nbytes: int) -> None:
        self.live[kind] += nbytes
        if self.live[kind] > self.peak[kind]:
            self.peak[kind] = self.live[kind]

    def release(self, kind: str, nbytes: int) -> None:
        self.live[kind] -= nbytes
        if self.live[kind] < 0:
            logger.warning("Tracker released more than it held", kind=kind, live=self.live[kind])
            self.live[kind] = 0

    @contextmanager
    def hold(self, kind: str, nbytes: int) -> Iterator[None]:
        """Register ``nbytes`` of ``kind`` for the duration of the block."""
        self.acquire(kind, nbytes)
        try:
            yield
        finally:
            self.release(kind, nbytes)

    def live_bytes(self, kind: Optional[str] = None) -> int:
        if kind is None:
            return sum(self.live.values())
        return self.live[kind]

    def peak_bytes(self, kind: str) -> int:
        return self.peak[kind]

    def reset_peaks(self) -> None:
        self.peak = defaultdict(int, self.live)

    def __repr__(self) -> str:
        return f"MemoryTracker(live={dict(self.live)}, peak={dict(self.peak)})"


memory_tracker = MemoryTracker()
