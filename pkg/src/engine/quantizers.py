"""Uniform affine and dense-and-sparse quantizers.

All model states are stored as unsigned integers with one (scale, zero-point)
pair per channel:

    quant:   q = clip(round(x / s) + z, 0, 2^b - 1)
    dequant: x_hat = s * (q - z)

Weights are split into a dense part, quantized over the per-channel threshold
range [T_min, T_max], and a sparse part that keeps the outliers beyond the
thresholds exactly, in CSR form.
"""
from dataclasses import dataclass
import math
from typing import Optional, Tuple, Union

import numpy as np
from scipy import sparse

from src.config import settings, get_logger
from src.engine.tensor import Tensor, TensorShapeError, as_channels, channel_minmax
from src.schemas import QuantConfig, ThresholdMode, WeightRounding

logger = get_logger(__name__)

PAYLOAD_DTYPE = np.uint8
INDEX_DTYPE = np.int32


class QuantizationError(ValueError):
    """Raised when quantizer inputs or parameters are invalid."""
    pass


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def stochastic_round(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Round down or up with probability equal to the fractional part.

    E[stochastic_round(x)] = x.
    """
    return np.floor(x + rng.random(x.shape))


@dataclass(frozen=True)
class AffineParams:
    """Per-channel scale and zero-point.

    Attributes:
        scale: Positive float32 scale, one per channel
        zero_point: int32 zero-point in [0, 2^b - 1], one per channel
        bit_width: Integer width b
    """

    scale: np.ndarray
    zero_point: np.ndarray
    bit_width: int = 8

    def __post_init__(self):
        if not 2 <= self.bit_width <= 8:
            raise QuantizationError(f"bit_width must be in [2, 8], got {self.bit_width}")
        if self.scale.shape != self.zero_point.shape or self.scale.ndim != 1:
            raise QuantizationError("scale and zero_point must be 1-D arrays of equal length")
        if not np.all(self.scale > 0):
            raise QuantizationError("scale must be positive for every channel")
        if np.any(self.zero_point < 0) or np.any(self.zero_point > self.qmax):
            raise QuantizationError(f"zero_point outside [0, {self.qmax}]")

    @property
    def qmax(self) -> int:
        return 2 ** self.bit_width - 1

    @property
    def num_channels(self) -> int:
        return int(self.scale.shape[0])

    @property
    def nbytes(self) -> int:
        return int(self.scale.nbytes + self.zero_point.nbytes)

    def broadcast_to(self, shape: Tuple[int, ...]) -> Tuple[np.ndarray, np.ndarray]:
        """Scale and zero-point shaped to broadcast against a tensor of ``shape``.

        Raises:
            QuantizationError: If the channel count does not match the tensor
        """
        if self.num_channels == 1:
            return self.scale[0], self.zero_point[0]
        if len(shape) == 2 and shape[0] == self.num_channels:
            return self.scale[:, None], self.zero_point[:, None]
        raise QuantizationError(
            f"Channel count mismatch: params have {self.num_channels} channels, tensor shape {shape}"
        )


@dataclass
class QuantizedTensor:
    """Integer payload plus the affine parameters needed to dequantize it."""

    values: np.ndarray
    params: AffineParams
    dtype: str = "float32"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def nbytes(self) -> int:
        return int(self.values.nbytes + self.params.nbytes)

    def dequantize(self) -> Tensor:
        return dequantize(self)


@dataclass
class PassThroughTensor:
    """Floating-point stand-in for a QuantizedTensor in the identity test mode."""

    data: np.ndarray

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def nbytes(self) -> int:
        return int(self.data.nbytes)

    def dequantize(self) -> Tensor:
        return self.data.copy()


StoredTensor = Union[QuantizedTensor, PassThroughTensor]


def affine_params_from_bounds(
    mins: np.ndarray,
    maxs: np.ndarray,
    bit_width: int = 8,
) -> AffineParams:
    """Scale and zero-point covering [min, max] per channel.

    The covered range is widened to include 0 so the zero-point never has to be
    clipped and 0 dequantizes exactly. A channel whose widened range is empty
    (all zeros) gets scale max(|min|, 1) * 2^exponent and zero-point 0.
    """
    if not 2 <= bit_width <= 8:
        raise QuantizationError(f"bit_width must be in [2, 8], got {bit_width}")
    qmax = 2 ** bit_width - 1
    mins = np.asarray(mins, dtype=np.float64)
    maxs = np.asarray(maxs, dtype=np.float64)
    lo = np.minimum(mins, 0.0)
    hi = np.maximum(maxs, 0.0)

    degenerate = hi == lo
    epsilon_scale = np.maximum(np.abs(mins), 1.0) * 2.0 ** settings.degenerate_scale_exponent
    scale = np.where(degenerate, epsilon_scale, (hi - lo) / qmax).astype(np.float32)

    zero_point = round_half_away(-lo / scale.astype(np.float64))
    zero_point = np.where(degenerate, 0, np.clip(zero_point, 0, qmax)).astype(np.int32)
    return AffineParams(scale=scale, zero_point=zero_point, bit_width=bit_width)


def compute_affine_params(values: Tensor, bit_width: int = 8, channel_wise: bool = True) -> AffineParams:
    """Derive (scale, zero-point) from the arithmetic bounds of a tensor.

    Args:
        values: 1-D or 2-D tensor
        bit_width: Integer width in [2, 8]
        channel_wise: One pair per row when True, one for the whole tensor otherwise

    Returns:
        AffineParams: s = (max - min) / (2^b - 1), z = round(-min / s)

    Raises:
        QuantizationError: If the tensor is empty or bit_width is out of range

    Example:
        >>> p = compute_affine_params(np.array([-1.0, 0.0, 2.0], dtype=np.float32))
        >>> round(float(p.scale[0]), 6), int(p.zero_point[0])
        (0.011765, 85)
    """
    if values.size == 0:
        raise QuantizationError("Cannot derive quantization parameters from an empty tensor")
    if channel_wise:
        mins, maxs = channel_minmax(values)
    else:
        mins, maxs = np.array([values.min()]), np.array([values.max()])
    return affine_params_from_bounds(mins, maxs, bit_width)


def quantize(x: Tensor, params: AffineParams, rng: Optional[np.random.Generator] = None) -> QuantizedTensor:
    """Map a floating-point tensor onto the integer grid defined by ``params``.

    Rounds to nearest (ties away from zero), or stochastically when ``rng`` is given.

    Raises:
        QuantizationError: If the channel count of ``params`` does not fit ``x``
    """
    scale, zero_point = params.broadcast_to(x.shape)
    grid = x / scale
    q = (round_half_away(grid) if rng is None else stochastic_round(grid, rng)) + zero_point
    q = np.clip(q, 0, params.qmax).astype(PAYLOAD_DTYPE)
    return QuantizedTensor(values=q, params=params, dtype=x.dtype.name)


def dequantize(q: QuantizedTensor) -> Tensor:
    """x_hat = s * (q - z), per channel."""
    scale, zero_point = q.params.broadcast_to(q.values.shape)
    dtype = np.dtype(q.dtype)
    centered = q.values.astype(dtype) - np.asarray(zero_point, dtype=dtype)
    return (np.asarray(scale, dtype=dtype) * centered).astype(dtype, copy=False)


def outlier_tail_count(columns: int, outlier_fraction: float) -> int:
    """Entries per tail of a channel that fall outside the percentile thresholds.

    k = round(p/2 * n), raised to 1 for any p > 0 so that short channels still
    isolate their extremes, and capped at (n - 1) // 2 so a central value
    always remains.

    Example:
        >>> outlier_tail_count(64, 0.01), outlier_tail_count(256, 0.01), outlier_tail_count(64, 0.1)
        (1, 1, 3)
    """
    k = int(math.floor(outlier_fraction / 2.0 * columns + 0.5))
    if outlier_fraction > 0.0:
        k = max(k, 1)
    return min(k, (columns - 1) // 2)


@dataclass(frozen=True)
class ChannelThresholds:
    """Cached per-channel outlier bounds (T_min, T_max)."""

    t_min: np.ndarray
    t_max: np.ndarray

    @property
    def nbytes(self) -> int:
        return int(self.t_min.nbytes + self.t_max.nbytes)


def compute_outlier_thresholds(
    w: Tensor,
    outlier_fraction: float,
    mode: ThresholdMode = ThresholdMode.PERCENTILE,
) -> ChannelThresholds:
    """Per-channel thresholds beyond which entries are treated as outliers.

    ``percentile`` uses order statistics: with k = outlier_tail_count(n, p)
    entries per tail, T_min is the (k+1)-th smallest and T_max the (k+1)-th
    largest value of the channel. ``range`` moves each bound inwards by p/2 of
    the channel range.

    Args:
        w: Weight tensor [out x in]
        outlier_fraction: p in [0, 1)
        mode: Threshold interpretation

    Returns:
        ChannelThresholds: One (T_min, T_max) pair per row

    Raises:
        QuantizationError: If p is outside [0, 1) or w is empty
    """
    if not 0.0 <= outlier_fraction < 1.0:
        raise QuantizationError(f"outlier_fraction must be in [0, 1), got {outlier_fraction}")
    if w.size == 0:
        raise QuantizationError("Cannot compute thresholds of an empty tensor")
    rows = as_channels(w)
    n = rows.shape[1]

    if ThresholdMode(mode) == ThresholdMode.RANGE:
        lo, hi = channel_minmax(rows)
        margin = (outlier_fraction / 2.0) * (hi - lo)
        return ChannelThresholds(t_min=(lo + margin).astype(w.dtype), t_max=(hi - margin).astype(w.dtype))

    k = outlier_tail_count(n, outlier_fraction)
    ordered = np.sort(rows, axis=1)
    return ChannelThresholds(t_min=ordered[:, k].copy(), t_max=ordered[:, n - 1 - k].copy())


@dataclass
class SparseOutliers:
    """Exact floating-point outliers in compressed sparse row form."""

    matrix: sparse.csr_matrix

    @classmethod
    def from_mask(cls, w: Tensor, mask: np.ndarray) -> "SparseOutliers":
        """Collect the entries of ``w`` selected by ``mask`` (row-major order)."""
        rows, cols = np.nonzero(mask)
        counts = np.bincount(rows, minlength=w.shape[0])
        row_ptr = np.zeros(w.shape[0] + 1, dtype=INDEX_DTYPE)
        np.cumsum(counts, out=row_ptr[1:])
        matrix = sparse.csr_matrix(
            (w[rows, cols].copy(), cols.astype(INDEX_DTYPE), row_ptr),
            shape=w.shape,
        )
        return cls(matrix=matrix)

    @classmethod
    def from_arrays(
        cls,
        row_ptr: np.ndarray,
        col_idx: np.ndarray,
        values: np.ndarray,
        shape: Tuple[int, int],
    ) -> "SparseOutliers":
        outliers = cls(matrix=sparse.csr_matrix((values, col_idx, row_ptr), shape=shape))
        outliers.check()
        return outliers

    @property
    def row_ptr(self) -> np.ndarray:
        return self.matrix.indptr

    @property
    def col_idx(self) -> np.ndarray:
        return self.matrix.indices

    @property
    def values(self) -> np.ndarray:
        return self.matrix.data

    @property
    def nnz(self) -> int:
        return int(self.matrix.indptr[-1])

    @property
    def nbytes(self) -> int:
        return int(self.row_ptr.nbytes + self.col_idx.nbytes + self.values.nbytes)

    def row_indices(self) -> np.ndarray:
        """Row index of every stored entry."""
        return np.repeat(np.arange(self.matrix.shape[0]), np.diff(self.row_ptr))

    def check(self) -> None:
        """Verify CSR well-formedness.

        Raises:
            QuantizationError: If row pointers or column indices are malformed
        """
        row_ptr = self.row_ptr
        if row_ptr.shape[0] != self.matrix.shape[0] + 1 or row_ptr[0] != 0:
            raise QuantizationError("row_ptr must have rows + 1 entries starting at 0")
        if np.any(np.diff(row_ptr) < 0):
            raise QuantizationError("row_ptr must be non-decreasing")
        if not row_ptr[-1] == len(self.col_idx) == len(self.values):
            raise QuantizationError("row_ptr[-1], col_idx and values disagree on nnz")
        if np.any(self.col_idx < 0) or np.any(self.col_idx >= self.matrix.shape[1]):
            raise QuantizationError("column index out of range")
        for r in range(self.matrix.shape[0]):
            if np.any(np.diff(self.col_idx[row_ptr[r]:row_ptr[r + 1]]) <= 0):
                raise QuantizationError(f"column indices of row {r} are not strictly increasing")


@dataclass
class DenseSparseWeight:
    """W = D + S: quantized dense part, exact sparse outliers, cached thresholds."""

    dense: QuantizedTensor
    sparse: SparseOutliers
    thresholds: ChannelThresholds
    outlier_fraction: float

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.dense.shape

    @property
    def nbytes(self) -> int:
        return self.dense.nbytes + self.sparse.nbytes + self.thresholds.nbytes

    def reconstruct(self) -> Tensor:
        return reconstruct(self)


@dataclass
class FloatWeight:
    """Plain floating-point weight storage (reference model and identity test mode)."""

    data: np.ndarray
    thresholds: Optional[ChannelThresholds] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def nbytes(self) -> int:
        return int(self.data.nbytes)

    def reconstruct(self) -> Tensor:
        return self.data.copy()


WeightStore = Union[DenseSparseWeight, FloatWeight]


def decompose_dense_sparse(
    w: Tensor,
    thresholds: ChannelThresholds,
    bit_width: int = 8,
    outlier_fraction: float = 0.0,
    channel_wise: bool = True,
    rng: Optional[np.random.Generator] = None,
) -> DenseSparseWeight:
    """Split a weight matrix into a quantized dense part and exact outliers.

    Entries with w < T_min or w > T_max of their row move to the sparse part;
    their slots in the dense payload hold the zero-point. The dense scale is
    derived from [T_min, T_max], not from the remaining values.

    Raises:
        QuantizationError: If thresholds do not match the rows of w or T_min > T_max
    """
    if w.ndim != 2:
        raise QuantizationError(f"Dense-and-sparse decomposition expects a 2-D weight, got {w.shape}")
    t_min, t_max = thresholds.t_min, thresholds.t_max
    if t_min.shape != (w.shape[0],) or t_max.shape != (w.shape[0],):
        raise QuantizationError(
            f"Expected {w.shape[0]} thresholds per bound, got {t_min.shape} and {t_max.shape}"
        )
    if np.any(t_min > t_max):
        raise QuantizationError("T_min exceeds T_max for at least one channel")

    mask = (w < t_min[:, None]) | (w > t_max[:, None])
    if channel_wise:
        params = affine_params_from_bounds(t_min, t_max, bit_width)
    else:
        params = affine_params_from_bounds(np.array([t_min.min()]), np.array([t_max.max()]), bit_width)

    central = np.where(mask, w.dtype.type(0), w)
    return DenseSparseWeight(
        dense=quantize(central, params, rng),
        sparse=SparseOutliers.from_mask(w, mask),
        thresholds=thresholds,
        outlier_fraction=outlier_fraction,
    )


def reconstruct(dsw: DenseSparseWeight) -> Tensor:
    """Dequantized dense part with the exact outliers written over their positions."""
    w_hat = dequantize(dsw.dense)
    if dsw.sparse.nnz:
        w_hat[dsw.sparse.row_indices(), dsw.sparse.col_idx] = dsw.sparse.values
    return w_hat


def l2_distance(a: Tensor, b: Tensor) -> float:
    """Euclidean distance between two tensors of the same shape.

    Raises:
        TensorShapeError: If shapes differ
    """
    if a.shape != b.shape:
        raise TensorShapeError(f"l2_distance shapes differ: {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    return float(np.sqrt(np.sum(diff * diff)))


class AffineQuantizer:
    """Uniform quantizer for gradients and momentum with fresh parameters per call."""

    pass_through = False

    def __init__(self, bit_width: Optional[int] = None, channel_wise: bool = True):
        self.bit_width = bit_width if bit_width is not None else settings.default_bit_width
        self.channel_wise = channel_wise
        if not 2 <= self.bit_width <= 8:
            raise QuantizationError(f"bit_width must be in [2, 8], got {self.bit_width}")

    def quantize(self, x: Tensor) -> QuantizedTensor:
        return quantize(x, compute_affine_params(x, self.bit_width, self.channel_wise))

    def __repr__(self) -> str:
        return f"AffineQuantizer(bit_width={self.bit_width}, channel_wise={self.channel_wise})"


class PassThroughQuantizer:
    """Identity quantizer: stores the floating-point tensor unchanged."""

    pass_through = True

    def quantize(self, x: Tensor) -> PassThroughTensor:
        return PassThroughTensor(data=x.copy())

    def __repr__(self) -> str:
        return "PassThroughQuantizer()"


class DenseSparseQuantizer:
    """Weight quantizer: thresholds at fraction p, then dense-and-sparse decomposition."""

    pass_through = False

    def __init__(
        self,
        bit_width: Optional[int] = None,
        outlier_fraction: Optional[float] = None,
        threshold_mode: ThresholdMode = ThresholdMode.PERCENTILE,
        channel_wise: bool = True,
        rounding: WeightRounding = WeightRounding.NEAREST,
        seed: int = 0,
    ):
        self.bit_width = bit_width if bit_width is not None else settings.default_bit_width
        self.outlier_fraction = (
            outlier_fraction if outlier_fraction is not None else settings.default_outlier_fraction
        )
        self.threshold_mode = ThresholdMode(threshold_mode)
        self.channel_wise = channel_wise
        self.rounding = WeightRounding(rounding)
        self.rng = np.random.default_rng(seed)

    def thresholds(self, w: Tensor) -> ChannelThresholds:
        return compute_outlier_thresholds(w, self.outlier_fraction, self.threshold_mode)

    def decompose(self, w: Tensor, thresholds: Optional[ChannelThresholds] = None) -> DenseSparseWeight:
        """Decompose against cached thresholds, computing them first when absent."""
        if thresholds is None:
            thresholds = self.thresholds(w)
        return decompose_dense_sparse(
            w, thresholds, self.bit_width, self.outlier_fraction, self.channel_wise
        )

    def requantize(self, w: Tensor, thresholds: ChannelThresholds) -> DenseSparseWeight:
        """Store an updated weight against its cached thresholds.

        With stochastic rounding the dense part draws from this quantizer's
        seeded generator, so a run is reproducible from its seed.
        """
        rng = self.rng if self.rounding == WeightRounding.STOCHASTIC else None
        return decompose_dense_sparse(
            w, thresholds, self.bit_width, self.outlier_fraction, self.channel_wise, rng
        )

    def __repr__(self) -> str:
        return (
            f"DenseSparseQuantizer(bit_width={self.bit_width}, outlier_fraction={self.outlier_fraction}, "
            f"threshold_mode={self.threshold_mode.value}, rounding={self.rounding.value})"
        )


class PassThroughWeightQuantizer:
    """Identity weight quantizer: keeps weights as FloatWeight, no thresholds."""

    pass_through = True
    outlier_fraction = 0.0

    def thresholds(self, w: Tensor) -> None:
        return None

    def decompose(self, w: Tensor, thresholds: Optional[ChannelThresholds] = None) -> FloatWeight:
        return FloatWeight(data=w.copy())

    def requantize(self, w: Tensor, thresholds: Optional[ChannelThresholds] = None) -> FloatWeight:
        return FloatWeight(data=w.copy())

    def __repr__(self) -> str:
        return "PassThroughWeightQuantizer()"


WeightQuantizer = Union[DenseSparseQuantizer, PassThroughWeightQuantizer]
StateQuantizer = Union[AffineQuantizer, PassThroughQuantizer]


def build_quantizers(config: QuantConfig, seed: int = 0) -> Tuple[WeightQuantizer, StateQuantizer]:
    """Weight and state quantizers for a quantization configuration.

    ``seed`` drives stochastic weight rounding; nearest rounding ignores it.
    """
    if config.pass_through:
        logger.debug("Using pass-through quantizers")
        return PassThroughWeightQuantizer(), PassThroughQuantizer()
    return (
        DenseSparseQuantizer(
            bit_width=config.bit_width,
            outlier_fraction=config.outlier_fraction,
            threshold_mode=config.threshold_mode,
            channel_wise=config.channel_wise,
            rounding=config.weight_rounding,
            seed=seed,
        ),
        AffineQuantizer(bit_width=config.bit_width, channel_wise=config.channel_wise),
    )
