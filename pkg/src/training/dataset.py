"""Dataset ingestion and batch iteration.

A dataset is either a CSV file of floating-point values, where the last
``target_dim`` columns are targets, or a built-in synthetic generator:

    synthetic:reg-<in>-<out>-n<N>      regression targets of a seeded random ReLU net
    synthetic:cls-<in>-<classes>-n<N>  one-hot argmax of a seeded random ReLU net
"""
import csv
import queue
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

from src.config import settings, get_logger
from src.engine.tensor import Tensor, resolve_dtype

logger = get_logger(__name__)

SYNTHETIC_PATTERN = re.compile(r"^synthetic:(reg|cls)-(\d+)-(\d+)-n(\d+)$")
GENERATOR_HIDDEN = 16


class DatasetError(ValueError):
    """Raised when a dataset cannot be read or does not fit the model.

    Attributes:
        line: 1-based line number of the offending row, if any
    """

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class Dataset:
    """In-memory dataset; rows are already shuffled."""

    inputs: Tensor
    targets: Tensor
    source: str = ""

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.inputs.shape[1])

    @property
    def target_dim(self) -> int:
        return int(self.targets.shape[1])


def _synthetic(kind: str, input_dim: int, output_dim: int, rows: int, seed: int) -> Tuple[Tensor, Tensor]:
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, 1.0 / np.sqrt(input_dim), size=(GENERATOR_HIDDEN, input_dim))
    w2 = rng.normal(0.0, 1.0 / np.sqrt(GENERATOR_HIDDEN), size=(output_dim, GENERATOR_HIDDEN))
    x = rng.normal(0.0, 1.0, size=(rows, input_dim))
    y = np.maximum(x @ w1.T, 0.0) @ w2.T

    if kind == "cls":
        targets = np.zeros_like(y)
        targets[np.arange(rows), np.argmax(y, axis=1)] = 1.0
        return x, targets

    std = y.std(axis=0)
    y = (y - y.mean(axis=0)) / np.where(std > 0, std, 1.0)
    return x, y


def _read_csv(path: Path, target_dim: int) -> Tuple[Tensor, Tensor]:
    if not path.is_file():
        raise DatasetError(f"Dataset file not found: {path}")

    rows = []
    width = None
    with path.open(newline="") as handle:
        for line_number, fields in enumerate(csv.reader(handle), start=1):
            if not fields or not "".join(fields).strip() or fields[0].lstrip().startswith("#"):
                continue
            try:
                values = [float(field) for field in fields]
            except ValueError:
                raise DatasetError(f"non-numeric value in row {fields}", line=line_number)
            if not np.all(np.isfinite(values)):
                raise DatasetError("non-finite value", line=line_number)
            if width is None:
                width = len(values)
                if width <= target_dim:
                    raise DatasetError(
                        f"{width} columns leave no inputs for {target_dim} target columns", line=line_number
                    )
            elif len(values) != width:
                raise DatasetError(f"expected {width} columns, got {len(values)}", line=line_number)
            rows.append(values)

    if not rows:
        raise DatasetError(f"Dataset file has no rows: {path}")
    data = np.asarray(rows, dtype=np.float64)
    return data[:, :-target_dim], data[:, -target_dim:]


def ingest_dataset(
    path: str,
    input_dim: Optional[int] = None,
    target_dim: Optional[int] = None,
    seed: int = 0,
    dtype: str = "float32",
) -> Dataset:
    """Load a CSV file or generate a synthetic dataset, then shuffle it.

    Args:
        path: CSV path or ``synthetic:<kind>-<in>-<out>-n<N>``
        input_dim: Expected input width (first layer width), checked when given
        target_dim: Target width; also the number of trailing CSV target columns (default 1)
        seed: Seed for generation and shuffling
        dtype: Floating-point type of the returned tensors

    Returns:
        Dataset: Shuffled inputs and targets

    Raises:
        DatasetError: On parse errors (with line number) or dimension mismatches
    """
    match = SYNTHETIC_PATTERN.match(path)
    if path.startswith("synthetic:") and not match:
        raise DatasetError(
            f"Invalid synthetic dataset '{path}'. Use synthetic:reg-<in>-<out>-n<N> or synthetic:cls-<in>-<classes>-n<N>"
        )

    if match:
        kind = match.group(1)
        in_dim, out_dim, rows = (int(g) for g in match.groups()[1:])
        if in_dim < 1 or out_dim < 1 or rows < 1:
            raise DatasetError(f"Synthetic dataset dimensions must be positive: {path}")
        if kind == "cls" and out_dim < 2:
            raise DatasetError("Classification datasets need at least 2 classes")
        inputs, targets = _synthetic(kind, in_dim, out_dim, rows, seed)
    else:
        inputs, targets = _read_csv(Path(path), target_dim or 1)

    if input_dim is not None and inputs.shape[1] != input_dim:
        raise DatasetError(f"Dataset has {inputs.shape[1]} input columns, model expects {input_dim}")
    if target_dim is not None and targets.shape[1] != target_dim:
        raise DatasetError(f"Dataset has {targets.shape[1]} target columns, model expects {target_dim}")

    order = np.random.default_rng(seed).permutation(inputs.shape[0])
    float_type = resolve_dtype(dtype)
    dataset = Dataset(
        inputs=np.ascontiguousarray(inputs[order], dtype=float_type),
        targets=np.ascontiguousarray(targets[order], dtype=float_type),
        source=path,
    )
    logger.info("Dataset loaded", source=path, rows=len(dataset), inputs=dataset.input_dim, targets=dataset.target_dim)
    return dataset


class BatchLoader:
    """Deterministic mini-batch stream over a dataset.

    Rows are visited in a seeded permutation that is redrawn whenever fewer
    than ``batch_size`` rows remain. With ``prefetch > 0`` a worker thread
    prepares upcoming batches into a bounded queue; the batch order is the
    same either way.
    """

    def __init__(self, dataset: Dataset, batch_size: int, seed: int = 0, prefetch: Optional[int] = None):
        if batch_size > len(dataset):
            raise DatasetError(f"batch_size {batch_size} exceeds dataset size {len(dataset)}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.prefetch = settings.prefetch_batches if prefetch is None else prefetch

    def _generate(self, num_batches: int) -> Iterator[Tuple[Tensor, Tensor]]:
        rng = np.random.default_rng(self.seed)
        order = rng.permutation(len(self.dataset))
        position = 0
        for _ in range(num_batches):
            if position + self.batch_size > len(order):
                order = rng.permutation(len(self.dataset))
                position = 0
            index = order[position:position + self.batch_size]
            position += self.batch_size
            yield self.dataset.inputs[index], self.dataset.targets[index]

    def batches(self, num_batches: int) -> Iterator[Tuple[Tensor, Tensor]]:
        """Yield ``num_batches`` (inputs, targets) pairs."""
        if self.prefetch <= 0:
            yield from self._generate(num_batches)
            return
        yield from self._prefetched(num_batches)

    def _prefetched(self, num_batches: int) -> Iterator[Tuple[Tensor, Tensor]]:
        handoff: queue.Queue = queue.Queue(maxsize=self.prefetch)
        stop = threading.Event()
        done = object()

        def put(item) -> bool:
            while not stop.is_set():
                try:
                    handoff.put(item, timeout=0.1)
                    return True
                except queue.Full:
                    continue
            return False

        def worker() -> None:
            try:
                for batch in self._generate(num_batches):
                    if not put(batch):
                        return
                put(done)
            except Exception as e:  # forwarded to the consumer
                put(e)

        thread = threading.Thread(target=worker, name="batch-prefetch", daemon=True)
        thread.start()
        logger.debug("Prefetch worker started", depth=self.prefetch, batches=num_batches)
        try:
            while True:
                item = handoff.get()
                if item is done:
                    return
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            stop.set()
            thread.join(timeout=1.0)
