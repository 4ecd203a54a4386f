"""Manual backward pass over quantized weights with a global gradient stack.

For l = L..1 the stored weight is dequantized, the input and weight gradients
are formed by the chain rule, the weight gradient is quantized and pushed onto
the stack, and the input gradient becomes the next layer's output gradient.
Pushing last-layer-first lets the optimizer pop first-layer-first in O(1).
"""
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from src.config import get_logger
from src.engine.network import SavedTensor
from src.engine.quantizers import StateQuantizer, StoredTensor
from src.engine.tensor import Tensor, TensorShapeError, matmul, relu_backward
from src.engine.tracking import memory_tracker, GRADIENT, WEIGHT

logger = get_logger(__name__)


class GradientFlowError(ValueError):
    """Raised when saved tensors, gradients and the stack disagree."""
    pass


class StackUnderflowError(GradientFlowError):
    """Raised when popping from an empty gradient stack."""
    pass


@dataclass
class StackEntry:
    """A layer's quantized weight gradient."""

    layer_index: int
    gradient: StoredTensor


class GradientStack:
    """FILO container of per-layer quantized gradients.

    Backward pushes layers L, L-1, ..., 1; the optimizer pops 1, 2, ..., L.
    """

    def __init__(self):
        self.entries: List[StackEntry] = []

    def push(self, layer_index: int, gradient: StoredTensor) -> None:
        self.entries.append(StackEntry(layer_index, gradient))

    def pop(self) -> Tuple[int, StoredTensor]:
        """Remove and return the most recently pushed entry.

        Raises:
            StackUnderflowError: If the stack is empty
        """
        if not self.entries:
            raise StackUnderflowError("pop from an empty gradient stack")
        entry = self.entries.pop()
        return entry.layer_index, entry.gradient

    def replace(self, position: int, layer_index: int, gradient: StoredTensor) -> None:
        """Overwrite the entry at ``position`` (0 = bottom), keeping stack order."""
        if self.entries[position].layer_index != layer_index:
            raise GradientFlowError(
                f"Stack position {position} holds layer {self.entries[position].layer_index}, "
                f"not {layer_index}"
            )
        self.entries[position] = StackEntry(layer_index, gradient)

    def drain(self) -> List[Tuple[int, StoredTensor]]:
        """Pop every entry, in pop order."""
        drained = []
        while self.entries:
            drained.append(self.pop())
        return drained

    @property
    def nbytes(self) -> int:
        return sum(entry.gradient.nbytes for entry in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __repr__(self) -> str:
        return f"GradientStack(layers={[e.layer_index for e in self.entries]})"


def push(stack: GradientStack, layer_index: int, gradient: StoredTensor) -> None:
    stack.push(layer_index, gradient)


def pop(stack: GradientStack) -> Tuple[int, StoredTensor]:
    return stack.pop()


def _accumulated_sum(accumulated: StoredTensor, g_new: Tensor) -> Tensor:
    if accumulated.shape != g_new.shape:
        raise TensorShapeError(f"accumulate shapes differ: {accumulated.shape} vs {g_new.shape}")
    total = accumulated.dequantize()
    total += g_new
    return total


def accumulate(
    accumulated: StoredTensor,
    g_new: Tensor,
    quantizer: StateQuantizer,
) -> StoredTensor:
    """Add a micro-batch gradient to a stored gradient and requantize.

    The sum is requantized with fresh parameters, so the stored gradient stays
    in integer form between micro-batches. Each call adds at most s/2 of
    rounding error per element.

    Raises:
        TensorShapeError: If shapes differ
    """
    total = _accumulated_sum(accumulated, g_new)
    with memory_tracker.hold(GRADIENT, total.nbytes):
        return quantizer.quantize(total)


def backward(
    saved: List[SavedTensor],
    g_o: Tensor,
    stack: GradientStack,
    quantizer: StateQuantizer,
) -> float:
    """Backpropagate through the saved layers and push quantized weight gradients.

    When the stack already holds one entry per layer (a previous micro-batch),
    each new gradient is accumulated into its entry instead of pushed. The
    saved tensors are consumed: the list is empty afterwards.

    Args:
        saved: Saved tensors from forward, layer order 1..L
        g_o: Gradient of the loss with respect to the network output
        stack: Gradient stack, empty or holding the previous accumulation
        quantizer: State quantizer for gradients, normally the model's

    Returns:
        float: Squared L2 norm of the floating-point gradients that were quantized

    Raises:
        GradientFlowError: If saved is empty or inconsistent with the stack
        TensorShapeError: If g_o does not match the last layer's output
    """
    if not saved:
        raise GradientFlowError("backward called without saved tensors")
    num_layers = len(saved)

    accumulating = len(stack) > 0
    if accumulating and len(stack) != num_layers:
        raise GradientFlowError(
            f"Stack holds {len(stack)} gradients but {num_layers} layers were saved"
        )

    last = saved[-1]
    if g_o.ndim != 2 or g_o.shape != (last.inputs.shape[0], last.weight.shape[0]):
        raise TensorShapeError(
            f"Output gradient shape {g_o.shape} does not match "
            f"({last.inputs.shape[0]}, {last.weight.shape[0]})"
        )

    squared_norm = 0.0
    while saved:
        entry = saved.pop()
        position = num_layers - 1 - len(saved)

        w_hat = entry.weight.reconstruct()
        with memory_tracker.hold(WEIGHT, w_hat.nbytes):
            g_i = matmul(g_o, w_hat) if saved else None
        del w_hat

        g_w = matmul(g_o.T, entry.inputs)
        if accumulating:
            g_w = _accumulated_sum(stack.entries[position].gradient, g_w)
        with memory_tracker.hold(GRADIENT, g_w.nbytes):
            stored = quantizer.quantize(g_w)
            squared_norm += float(np.sum(g_w.astype(np.float64) ** 2))
        if accumulating:
            stack.replace(position, entry.layer_index, stored)
        else:
            stack.push(entry.layer_index, stored)
        del g_w

        if g_i is not None:
            g_o = relu_backward(entry.inputs, g_i) if entry.input_activated else g_i

    logger.debug("Backward complete", layers=num_layers, accumulated=accumulating)
    return squared_norm
