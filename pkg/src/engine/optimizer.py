"""Quantized Lion step plus floating-point Lion and Adam references.

The quantized step walks the layers in order 1..L, popping each layer's
gradient off the stack, dequantizing gradient, momentum and weight, applying
the Lion rule, and storing momentum and weight back in quantized form. The
weight is re-decomposed against the thresholds cached for the current epoch,
so entries may move between the dense and the sparse part. Its dense part is
rounded to nearest, or stochastically when the model is configured for it.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from src.config import get_logger
from src.engine.gradflow import GradientStack, StackUnderflowError
from src.engine.network import Model
from src.engine.quantizers import FloatWeight, StoredTensor
from src.engine.tensor import Tensor, TensorShapeError
from src.engine.tracking import memory_tracker, GRADIENT, MOMENTUM, WEIGHT
from src.schemas import AdamHyper, LionHyper

logger = get_logger(__name__)


class OptimizerError(ValueError):
    """Raised when optimizer state, gradients and model disagree."""
    pass


def sign(x: Tensor) -> Tensor:
    """Elementwise sign in {-1, 0, +1}, with sign(0) = 0."""
    return np.sign(x)


def lion_update(
    w: Tensor,
    m: Tensor,
    g: Tensor,
    hyper: LionHyper,
    lr: Optional[float] = None,
) -> Tuple[Tensor, Tensor]:
    """One Lion update on floating-point tensors.

    delta = b1*m + (1-b1)*g
    w'    = w - lr*(sign(delta) + lambda*w)
    m'    = b2*m + (1-b2)*g

    Returns:
        tuple: (updated weight, updated momentum)
    """
    if not (w.shape == m.shape == g.shape):
        raise TensorShapeError(f"Lion operands differ in shape: {w.shape}, {m.shape}, {g.shape}")
    dtype = w.dtype.type
    lr = dtype(hyper.lr if lr is None else lr)
    beta1, beta2 = dtype(hyper.beta1), dtype(hyper.beta2)

    delta = beta1 * m + (dtype(1.0) - beta1) * g
    update = sign(delta)
    if hyper.weight_decay:
        update = update + dtype(hyper.weight_decay) * w
    w_new = w - lr * update
    m_new = beta2 * m + (dtype(1.0) - beta2) * g
    return w_new, m_new


@dataclass
class LionState:
    """Per-layer quantized momentum m_l."""

    momenta: List[StoredTensor]

    @property
    def momentum_nbytes(self) -> int:
        return sum(m.nbytes for m in self.momenta)

    @property
    def variances_nbytes(self) -> int:
        return 0


@dataclass
class ReferenceLionState:
    """Per-layer floating-point momentum."""

    momenta: List[Tensor]

    @property
    def momentum_nbytes(self) -> int:
        return sum(int(m.nbytes) for m in self.momenta)

    @property
    def variances_nbytes(self) -> int:
        return 0


@dataclass
class AdamState:
    """Per-layer floating-point first and second moments plus the step count."""

    momenta: List[Tensor]
    variances: List[Tensor]
    step: int = 0

    @property
    def momentum_nbytes(self) -> int:
        return sum(int(m.nbytes) for m in self.momenta)

    @property
    def variances_nbytes(self) -> int:
        return sum(int(v.nbytes) for v in self.variances)


def _zeros_like_layers(model: Model) -> List[Tensor]:
    return [np.zeros(layer.weight.shape, dtype=model.dtype) for layer in model.layers]


def init_lion_state(model: Model) -> LionState:
    """Zero momentum for every layer, stored with the model's state quantizer."""
    return LionState(momenta=[model.state_quantizer.quantize(z) for z in _zeros_like_layers(model)])


def init_reference_lion_state(model: Model) -> ReferenceLionState:
    return ReferenceLionState(momenta=_zeros_like_layers(model))


def init_adam_state(model: Model) -> AdamState:
    return AdamState(momenta=_zeros_like_layers(model), variances=_zeros_like_layers(model))


def lion_step_quantized(
    model: Model,
    state: LionState,
    stack: GradientStack,
    hyper: LionHyper,
    lr: Optional[float] = None,
) -> None:
    """Quantized Lion step over all layers, consuming the gradient stack.

    Args:
        model: Model whose weights are updated in place
        state: Quantized momentum, updated in place
        stack: Holds exactly one gradient per layer, poppable in order 1..L
        hyper: Lion hyperparameters
        lr: Learning rate for this step (defaults to hyper.lr)

    Raises:
        StackUnderflowError: If the stack holds fewer gradients than layers
        OptimizerError: If the stack holds extra gradients or layers/shapes disagree
    """
    if len(stack) < model.num_layers:
        raise StackUnderflowError(f"Stack holds {len(stack)} gradients for {model.num_layers} layers")
    if len(stack) > model.num_layers:
        raise OptimizerError(f"Stack holds {len(stack)} gradients for {model.num_layers} layers")
    if len(state.momenta) != model.num_layers:
        raise OptimizerError(f"State holds {len(state.momenta)} momenta for {model.num_layers} layers")

    for position, layer in enumerate(model.layers):
        layer_index, g_q = stack.pop()
        if layer_index != layer.layer_index:
            raise OptimizerError(f"Popped gradient of layer {layer_index} while updating layer {layer.layer_index}")
        if g_q.shape != layer.weight.shape:
            raise OptimizerError(f"Gradient shape {g_q.shape} does not match weight {layer.weight.shape}")

        g = g_q.dequantize()
        m = state.momenta[position].dequantize()
        w = layer.weight.reconstruct()
        with memory_tracker.hold(GRADIENT, g.nbytes), memory_tracker.hold(MOMENTUM, m.nbytes), \
                memory_tracker.hold(WEIGHT, w.nbytes):
            w, m = lion_update(w, m, g, hyper, lr)
            state.momenta[position] = model.state_quantizer.quantize(m)
            layer.weight = model.weight_quantizer.requantize(w, layer.weight.thresholds)
        del g, m, w

    logger.debug("Quantized Lion step", layers=model.num_layers, lr=hyper.lr if lr is None else lr)


def pop_gradients(stack: GradientStack, model: Model) -> List[Tensor]:
    """Drain the stack into floating-point gradients in layer order 1..L."""
    if len(stack) != model.num_layers:
        raise OptimizerError(f"Stack holds {len(stack)} gradients for {model.num_layers} layers")
    grads = []
    for layer in model.layers:
        layer_index, g_q = stack.pop()
        if layer_index != layer.layer_index:
            raise OptimizerError(f"Popped gradient of layer {layer_index} while expecting {layer.layer_index}")
        grads.append(g_q.dequantize())
    return grads


def _float_weights(model: Model, grads: List[Tensor]) -> List[FloatWeight]:
    if len(grads) != model.num_layers:
        raise OptimizerError(f"Got {len(grads)} gradients for {model.num_layers} layers")
    weights = []
    for layer, g in zip(model.layers, grads):
        if not isinstance(layer.weight, FloatWeight):
            raise OptimizerError("Reference optimizers need floating-point weight storage")
        if g.shape != layer.weight.shape:
            raise TensorShapeError(f"Gradient shape {g.shape} does not match weight {layer.weight.shape}")
        weights.append(layer.weight)
    return weights


def lion_step_reference(
    model: Model,
    state: ReferenceLionState,
    grads: List[Tensor],
    hyper: LionHyper,
    lr: Optional[float] = None,
) -> None:
    """Floating-point Lion step; same rule as the quantized step without any (de)quantization."""
    weights = _float_weights(model, grads)
    for position, (layer, weight, g) in enumerate(zip(model.layers, weights, grads)):
        w_new, m_new = lion_update(weight.data, state.momenta[position], g, hyper, lr)
        state.momenta[position] = m_new
        layer.weight = FloatWeight(data=w_new)


def adam_update(
    w: Tensor,
    m: Tensor,
    v: Tensor,
    g: Tensor,
    hyper: AdamHyper,
    step: int,
    lr: Optional[float] = None,
) -> Tuple[Tensor, Tensor, Tensor]:
    """Adam with bias correction; weight decay is added to the gradient (L2)."""
    dtype = w.dtype.type
    lr = dtype(hyper.lr if lr is None else lr)
    beta1, beta2 = dtype(hyper.beta1), dtype(hyper.beta2)
    if hyper.weight_decay:
        g = g + dtype(hyper.weight_decay) * w

    m_new = beta1 * m + (dtype(1.0) - beta1) * g
    v_new = beta2 * v + (dtype(1.0) - beta2) * g * g
    m_hat = m_new / dtype(1.0 - hyper.beta1 ** step)
    v_hat = v_new / dtype(1.0 - hyper.beta2 ** step)
    w_new = w - lr * m_hat / (np.sqrt(v_hat) + dtype(hyper.eps))
    return w_new, m_new, v_new


def adam_step_reference(
    model: Model,
    state: AdamState,
    grads: List[Tensor],
    hyper: AdamHyper,
    lr: Optional[float] = None,
) -> None:
    """Floating-point Adam step with bias correction."""
    weights = _float_weights(model, grads)
    state.step += 1
    for position, (layer, weight, g) in enumerate(zip(model.layers, weights, grads)):
        w_new, m_new, v_new = adam_update(
            weight.data, state.momenta[position], state.variances[position], g, hyper, state.step, lr
        )
        state.momenta[position] = m_new
        state.variances[position] = v_new
        layer.weight = FloatWeight(data=w_new)
