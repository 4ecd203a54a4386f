"""Dense 1-D/2-D floating-point tensor substrate.

Tensors are plain ``numpy.ndarray`` values. This module only adds the shape
rules the engine relies on: row-major storage, weight matrices laid out as
[out_features x in_features] so that a channel is an output row, and explicit
shape errors instead of numpy broadcasting.
"""
from typing import Literal, Tuple

import numpy as np
import numpy.typing as npt

from src.config import get_logger

logger = get_logger(__name__)

Tensor = npt.NDArray[np.floating]
DTypeName = Literal["float32", "float64"]

DTYPES: dict[str, type[np.floating]] = {
    "float32": np.float32,
    "float64": np.float64,
}


class TensorShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""
    pass


def resolve_dtype(name: DTypeName) -> type[np.floating]:
    """Map a dtype name from configuration to the numpy scalar type."""
    try:
        return DTYPES[name]
    except KeyError:
        raise TensorShapeError(f"Unsupported dtype: {name}. Use one of {sorted(DTYPES)}")


def as_tensor(data, dtype: DTypeName = "float32") -> Tensor:
    """Build a validated 1-D or 2-D tensor.

    Args:
        data: Anything ``numpy.asarray`` accepts
        dtype: Element type name

    Returns:
        Tensor: Contiguous array of the requested dtype

    Raises:
        TensorShapeError: If the result is not 1-D/2-D or holds non-finite values
    """
    array = np.ascontiguousarray(np.asarray(data, dtype=resolve_dtype(dtype)))
    if array.ndim not in (1, 2):
        raise TensorShapeError(f"Tensors must be 1-D or 2-D, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise TensorShapeError("Tensor holds NaN or Inf values")
    return array


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [m x k] and b [k x n].

    Raises:
        TensorShapeError: If either operand is not 2-D or inner dimensions differ
    """
    if a.ndim != 2 or b.ndim != 2:
        raise TensorShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise TensorShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def transpose(a: Tensor) -> Tensor:
    """Swap rows and columns; 1-D tensors are returned unchanged."""
    return np.ascontiguousarray(a.T)


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, x)."""
    return np.maximum(a, a.dtype.type(0))


def relu_backward(a: Tensor, g: Tensor) -> Tensor:
    """Mask the incoming gradient where the activation input was not positive.

    Args:
        a: Tensor that was fed to (or produced by) relu
        g: Gradient with respect to relu's output

    Raises:
        TensorShapeError: If shapes of a and g differ
    """
    if a.shape != g.shape:
        raise TensorShapeError(f"relu_backward shapes differ: {a.shape} vs {g.shape}")
    return np.where(a > 0, g, g.dtype.type(0))


def channel_minmax(a: Tensor) -> Tuple[Tensor, Tensor]:
    """Per-row minimum and maximum.

    A 1-D tensor is a single channel.

    Returns:
        tuple: (mins, maxs), each with one entry per channel

    Raises:
        TensorShapeError: If the tensor is empty
    """
    if a.size == 0:
        raise TensorShapeError("channel_minmax of an empty tensor")
    rows = a.reshape(1, -1) if a.ndim == 1 else a
    return rows.min(axis=1), rows.max(axis=1)


def as_channels(a: Tensor) -> Tensor:
    """View a tensor as [channels x elements]; 1-D tensors are one channel."""
    return a.reshape(1, -1) if a.ndim == 1 else a
