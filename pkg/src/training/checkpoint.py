"""Binary checkpoints of a model and its optimizer state.

Layout (all integers little-endian)::

    magic "QFTC" | version u16 | payload length u64
    payload:
        state kind u8 | layer count u32 | bit width u8 | outlier fraction f64
        step u64 | adam step u64 | config JSON length u32 | config JSON
        per layer: weight record, then the layer's optimizer state tensors
    crc32 u32 over everything before it

A tensor record starts with a storage-kind byte (affine integer, fp32 or
fp64) followed by its shape. Affine records carry the bit width, per-channel
fp32 scales and int32 zero-points and the uint8 payload. Dense-and-sparse
weights are stored as their dense record, the cached thresholds and the CSR
arrays of the outliers.
"""
import enum
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Union

import numpy as np

from src.config import settings, get_logger
from src.engine.network import Model, QuantizedLinearLayer
from src.engine.optimizer import AdamState, LionState, ReferenceLionState
from src.engine.quantizers import (
    AffineParams,
    ChannelThresholds,
    DenseSparseWeight,
    FloatWeight,
    PassThroughTensor,
    QuantizationError,
    QuantizedTensor,
    SparseOutliers,
    WeightStore,
    build_quantizers,
)
from src.schemas import ModelConfig, QuantConfig

logger = get_logger(__name__)

MAGIC = b"QFTC"
PREAMBLE = struct.Struct("<4sHQ")
CRC = struct.Struct("<I")

OptimizerState = Union[LionState, ReferenceLionState, AdamState]


class CheckpointError(Exception):
    """Base class for checkpoint failures."""
    pass


class CheckpointFormatError(CheckpointError):
    """Raised for bad magic, unsupported versions, truncation or malformed records."""
    pass


class CheckpointIntegrityError(CheckpointError):
    """Raised when the stored CRC32 does not match the file contents."""
    pass


class StorageKind(enum.IntEnum):
    AFFINE = 0
    FP32 = 1
    FP64 = 2


class WeightKind(enum.IntEnum):
    DENSE_SPARSE = 0
    FLOAT = 1


class StateKind(enum.IntEnum):
    LION = 0
    LION_REFERENCE = 1
    ADAM = 2


FLOAT_KINDS = {"float32": StorageKind.FP32, "float64": StorageKind.FP64}
FLOAT_TYPES = {StorageKind.FP32: np.dtype("<f4"), StorageKind.FP64: np.dtype("<f8")}
DTYPE_CODES = {"float32": 0, "float64": 1}
DTYPE_NAMES = {code: name for name, code in DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    """A loaded checkpoint; unpacks as ``model, state``."""

    model: Model
    state: OptimizerState
    step: int = 0
    optimizer_kind: Optional[str] = None

    def __iter__(self) -> Iterator:
        return iter((self.model, self.state))


class _Writer:
    def __init__(self):
        self.buffer = bytearray()

    def pack(self, fmt: str, *values) -> None:
        self.buffer += struct.pack("<" + fmt, *values)

    def array(self, values: np.ndarray, dtype: str) -> None:
        self.buffer += np.ascontiguousarray(values, dtype=np.dtype(dtype)).tobytes()

    def shape(self, shape) -> None:
        self.pack("B", len(shape))
        for dim in shape:
            self.pack("I", dim)

    def floats(self, values: np.ndarray) -> None:
        kind = FLOAT_KINDS.get(values.dtype.name)
        if kind is None:
            raise CheckpointError(f"Cannot store dtype {values.dtype}")
        self.pack("B", kind)
        self.shape(values.shape)
        self.array(values, FLOAT_TYPES[kind].str)

    def tensor(self, tensor: Union[QuantizedTensor, PassThroughTensor, np.ndarray]) -> None:
        if isinstance(tensor, PassThroughTensor):
            self.floats(tensor.data)
            return
        if isinstance(tensor, np.ndarray):
            self.floats(tensor)
            return
        params = tensor.params
        self.pack("B", StorageKind.AFFINE)
        self.shape(tensor.shape)
        self.pack("BBI", params.bit_width, DTYPE_CODES[tensor.dtype], params.num_channels)
        self.array(params.scale, "<f4")
        self.array(params.zero_point, "<i4")
        self.array(tensor.values, "u1")

    def weight(self, weight: WeightStore) -> None:
        if isinstance(weight, FloatWeight):
            self.pack("B", WeightKind.FLOAT)
            self.floats(weight.data)
            return
        self.pack("B", WeightKind.DENSE_SPARSE)
        self.tensor(weight.dense)
        self.floats(weight.thresholds.t_min)
        self.floats(weight.thresholds.t_max)
        sparse = weight.sparse
        self.pack("I", sparse.nnz)
        self.array(sparse.row_ptr, "<i4")
        self.array(sparse.col_idx, "<i4")
        self.floats(sparse.values)
        self.pack("d", weight.outlier_fraction)


class _Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.offset = offset

    def take(self, nbytes: int) -> bytes:
        if self.offset + nbytes > len(self.data):
            raise CheckpointFormatError(
                f"Checkpoint truncated: needed {nbytes} bytes at offset {self.offset}"
            )
        chunk = self.data[self.offset:self.offset + nbytes]
        self.offset += nbytes
        return chunk

    def unpack(self, fmt: str):
        layout = struct.Struct("<" + fmt)
        values = layout.unpack(self.take(layout.size))
        return values[0] if len(values) == 1 else values

    def array(self, dtype: str, count: int) -> np.ndarray:
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype).astype(dtype.newbyteorder("="))

    def shape(self) -> tuple:
        ndim = self.unpack("B")
        if ndim not in (1, 2):
            raise CheckpointFormatError(f"Unsupported tensor rank {ndim}")
        return tuple(self.unpack("I") for _ in range(ndim))

    def _kind(self) -> StorageKind:
        code = self.unpack("B")
        try:
            return StorageKind(code)
        except ValueError:
            raise CheckpointFormatError(f"Unknown storage kind {code}")

    def floats(self) -> np.ndarray:
        kind = self._kind()
        if kind == StorageKind.AFFINE:
            raise CheckpointFormatError("Expected a floating-point record")
        return self._float_body(kind)

    def _float_body(self, kind: StorageKind) -> np.ndarray:
        shape = self.shape()
        return self.array(FLOAT_TYPES[kind].str, int(np.prod(shape))).reshape(shape)

    def tensor(self) -> Union[QuantizedTensor, np.ndarray]:
        kind = self._kind()
        if kind != StorageKind.AFFINE:
            return self._float_body(kind)
        shape = self.shape()
        bit_width, dtype_code, channels = self.unpack("BBI")
        if dtype_code not in DTYPE_NAMES:
            raise CheckpointFormatError(f"Unknown dtype code {dtype_code}")
        scale = self.array("<f4", channels)
        zero_point = self.array("<i4", channels)
        values = self.array("u1", int(np.prod(shape))).reshape(shape)
        try:
            params = AffineParams(scale=scale, zero_point=zero_point, bit_width=bit_width)
        except QuantizationError as e:
            raise CheckpointFormatError(f"Invalid quantization parameters: {e}") from e
        return QuantizedTensor(values=values, params=params, dtype=DTYPE_NAMES[dtype_code])

    def weight(self) -> WeightStore:
        code = self.unpack("B")
        if code == WeightKind.FLOAT:
            return FloatWeight(data=self.floats())
        if code != WeightKind.DENSE_SPARSE:
            raise CheckpointFormatError(f"Unknown weight kind {code}")
        dense = self.tensor()
        if not isinstance(dense, QuantizedTensor) or len(dense.shape) != 2:
            raise CheckpointFormatError("Dense part must be a 2-D affine record")
        thresholds = ChannelThresholds(t_min=self.floats(), t_max=self.floats())
        nnz = self.unpack("I")
        row_ptr = self.array("<i4", dense.shape[0] + 1)
        col_idx = self.array("<i4", nnz)
        values = self.floats()
        outlier_fraction = self.unpack("d")
        try:
            sparse = SparseOutliers.from_arrays(row_ptr, col_idx, values, dense.shape)
        except (QuantizationError, ValueError) as e:
            raise CheckpointFormatError(f"Malformed sparse outliers: {e}") from e
        return DenseSparseWeight(dense=dense, sparse=sparse, thresholds=thresholds, outlier_fraction=outlier_fraction)


def _state_kind(state: OptimizerState) -> StateKind:
    if isinstance(state, LionState):
        return StateKind.LION
    if isinstance(state, ReferenceLionState):
        return StateKind.LION_REFERENCE
    if isinstance(state, AdamState):
        return StateKind.ADAM
    raise CheckpointError(f"Unsupported optimizer state {type(state).__name__}")


def checkpoint_bytes(
    model: Model,
    state: OptimizerState,
    step: int = 0,
    optimizer_kind: Optional[str] = None,
) -> bytes:
    """Serialize a model and its optimizer state.

    Raises:
        CheckpointError: If the state does not match the model
    """
    kind = _state_kind(state)
    if len(state.momenta) != model.num_layers:
        raise CheckpointError(f"State holds {len(state.momenta)} momenta for {model.num_layers} layers")

    meta = json.dumps(
        {
            "model": model.config.model_dump(mode="json"),
            "quant": model.quant.model_dump(mode="json"),
            "optimizer": optimizer_kind,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")

    body = _Writer()
    body.pack("BIBdQQ", kind, model.num_layers, model.quant.bit_width, model.quant.outlier_fraction,
              step, state.step if isinstance(state, AdamState) else 0)
    body.pack("I", len(meta))
    body.buffer += meta
    for position, layer in enumerate(model.layers):
        body.weight(layer.weight)
        body.tensor(state.momenta[position])
        if kind == StateKind.ADAM:
            body.tensor(state.variances[position])

    data = bytearray(PREAMBLE.pack(MAGIC, settings.checkpoint_version, len(body.buffer)))
    data += body.buffer
    data += CRC.pack(zlib.crc32(data) & 0xFFFFFFFF)
    return bytes(data)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    """Parse checkpoint bytes.

    Raises:
        CheckpointFormatError: Bad magic, unsupported version, truncation or malformed records
        CheckpointIntegrityError: CRC32 mismatch
    """
    if len(data) < PREAMBLE.size:
        raise CheckpointFormatError("Checkpoint truncated: missing header")
    magic, version, length = PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError(f"Not a checkpoint: bad magic {magic!r}")
    if version != settings.checkpoint_version:
        raise CheckpointFormatError(
            f"Unsupported checkpoint version {version} (expected {settings.checkpoint_version})"
        )
    end = PREAMBLE.size + length
    if len(data) < end + CRC.size:
        raise CheckpointFormatError(f"Checkpoint truncated: {len(data)} of {end + CRC.size} bytes")
    if len(data) > end + CRC.size:
        raise CheckpointFormatError("Trailing bytes after checkpoint")
    (stored_crc,) = CRC.unpack_from(data, end)
    if zlib.crc32(data[:end]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointIntegrityError("Checkpoint CRC32 mismatch")

    reader = _Reader(data[:end], PREAMBLE.size)
    code, num_layers, bit_width, outlier_fraction, step, adam_step = reader.unpack("BIBdQQ")
    try:
        kind = StateKind(code)
    except ValueError:
        raise CheckpointFormatError(f"Unknown state kind {code}")
    try:
        meta = json.loads(reader.take(reader.unpack("I")).decode("utf-8"))
        model_config = ModelConfig.model_validate(meta["model"])
        quant = QuantConfig.model_validate(meta["quant"])
    except (ValueError, KeyError) as e:
        raise CheckpointFormatError(f"Invalid configuration block: {e}") from e
    if model_config.num_layers != num_layers:
        raise CheckpointFormatError(f"Header says {num_layers} layers, configuration has {model_config.num_layers}")

    layers: List[QuantizedLinearLayer] = []
    momenta, variances = [], []
    for index in range(num_layers):
        layers.append(QuantizedLinearLayer(weight=reader.weight(), layer_index=index + 1))
        momentum = reader.tensor()
        if kind == StateKind.LION and isinstance(momentum, np.ndarray):
            momentum = PassThroughTensor(data=momentum)
        momenta.append(momentum)
        if kind == StateKind.ADAM:
            variances.append(reader.tensor())
    if reader.offset != end:
        raise CheckpointFormatError(f"{end - reader.offset} unparsed bytes in checkpoint")

    weight_quantizer, state_quantizer = build_quantizers(quant, model_config.seed)
    model = Model(
        config=model_config,
        layers=layers,
        weight_quantizer=weight_quantizer,
        state_quantizer=state_quantizer,
        quant=quant,
    )
    if kind == StateKind.LION:
        state = LionState(momenta=momenta)
    elif kind == StateKind.LION_REFERENCE:
        state = ReferenceLionState(momenta=momenta)
    else:
        state = AdamState(momenta=momenta, variances=variances, step=adam_step)
    return Checkpoint(model=model, state=state, step=step, optimizer_kind=meta.get("optimizer"))


def save_checkpoint(
    model: Model,
    state: OptimizerState,
    path: Union[str, Path],
    step: int = 0,
    optimizer_kind: Optional[str] = None,
) -> Path:
    """Write a checkpoint file, creating parent directories.

    Returns:
        Path: The written file
    """
    path = Path(path)
    data = checkpoint_bytes(model, state, step, optimizer_kind)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    logger.info("Checkpoint saved", path=str(path), bytes=len(data), step=step)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read a checkpoint file.

    Raises:
        CheckpointError: If the file is missing
        CheckpointFormatError: If the file is not a valid checkpoint
        CheckpointIntegrityError: If the checksum does not match
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")
    checkpoint = checkpoint_from_bytes(path.read_bytes())
    logger.info("Checkpoint loaded", path=str(path), layers=checkpoint.model.num_layers, step=checkpoint.step)
    return checkpoint
