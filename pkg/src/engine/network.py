"""Sequential bias-free MLP whose weights live only in quantized form.

Each layer stores a DenseSparseWeight. The forward pass reconstructs one
layer's floating-point weight at a time, uses it for the matmul and drops it
immediately; only the layer input and a handle to the stored weight are kept
for the backward pass.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from src.config import get_logger
from src.engine.quantizers import (
    WeightStore,
    WeightQuantizer,
    StateQuantizer,
    build_quantizers,
)
from src.engine.tensor import Tensor, TensorShapeError, matmul, relu, resolve_dtype
from src.engine.tracking import memory_tracker, WEIGHT
from src.schemas import Activation, LossKind, ModelConfig, QuantConfig

logger = get_logger(__name__)


class NetworkError(ValueError):
    """Raised for invalid model construction or loss requests."""
    pass


@dataclass
class QuantizedLinearLayer:
    """One linear layer; ``weight`` is [out_features x in_features]."""

    weight: WeightStore
    layer_index: int

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]


@dataclass
class SavedTensor:
    """What the backward pass needs from layer l: its input and its stored weight.

    Attributes:
        layer_index: 1-based layer index l
        inputs: Layer input I_l [batch x in_features]
        weight: Handle to the layer's stored weight (not a floating-point copy)
        input_activated: True when I_l is the relu output of the previous layer
    """

    layer_index: int
    inputs: Tensor
    weight: WeightStore
    input_activated: bool = False


@dataclass
class Model:
    """Layers plus the quantizers used to (re)store their states."""

    config: ModelConfig
    layers: List[QuantizedLinearLayer]
    weight_quantizer: WeightQuantizer
    state_quantizer: StateQuantizer
    quant: QuantConfig = field(default_factory=QuantConfig)

    @property
    def dtype(self) -> type[np.floating]:
        return resolve_dtype(self.config.dtype)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_parameters(self) -> int:
        return sum(layer.out_features * layer.in_features for layer in self.layers)

    @property
    def pass_through(self) -> bool:
        return bool(self.weight_quantizer.pass_through)

    def __repr__(self) -> str:
        return (
            f"Model(dims={self.config.layer_dims}, params={self.num_parameters}, "
            f"weight_quantizer={self.weight_quantizer!r})"
        )


def init_weights(config: ModelConfig) -> List[Tensor]:
    """Seeded floating-point initial weights.

    Entries are uniform in [-1/sqrt(in), 1/sqrt(in)]. When
    ``init_outlier_fraction`` is set, that share of entries per layer is
    replaced by outliers of magnitude ``init_outlier_scale`` to 10x that times
    the bound, with random sign.
    """
    rng = np.random.default_rng(config.seed)
    dtype = resolve_dtype(config.dtype)
    weights = []
    for fan_in, fan_out in zip(config.layer_dims[:-1], config.layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        count = int(round(config.init_outlier_fraction * w.size))
        if count:
            positions = rng.choice(w.size, size=count, replace=False)
            magnitude = rng.uniform(1.0, 10.0, size=count) * config.init_outlier_scale * bound
            w.flat[positions] = rng.choice([-1.0, 1.0], size=count) * magnitude
        weights.append(w.astype(dtype))
    return weights


def build_model(config: ModelConfig, quant: Optional[QuantConfig] = None) -> Model:
    """Initialize, threshold, decompose and store every layer.

    The floating-point init buffers are dropped once their layer is stored.

    Args:
        config: Architecture and seed
        quant: Quantizer selection (defaults from settings)

    Returns:
        Model: Layers holding DenseSparseWeight (FloatWeight in pass-through mode)
    """
    quant = quant or QuantConfig()
    weight_quantizer, state_quantizer = build_quantizers(quant, config.seed)

    layers = []
    init = init_weights(config)
    for index in range(len(init)):
        w = init[index]
        init[index] = None
        layers.append(QuantizedLinearLayer(weight=weight_quantizer.decompose(w), layer_index=index + 1))
        del w

    model = Model(
        config=config,
        layers=layers,
        weight_quantizer=weight_quantizer,
        state_quantizer=state_quantizer,
        quant=quant,
    )
    logger.info(
        "Model built",
        dims=config.layer_dims,
        parameters=model.num_parameters,
        pass_through=quant.pass_through,
        bit_width=quant.bit_width,
        outlier_fraction=quant.outlier_fraction,
    )
    return model


def build_reference_model(config: ModelConfig) -> Model:
    """Same architecture and init as build_model, with floating-point weight storage."""
    return build_model(config, QuantConfig(pass_through=True))


def forward(model: Model, x: Tensor, save: bool = True) -> Tuple[Tensor, List[SavedTensor]]:
    """Run the network, dequantizing each layer's weight on the fly.

    Args:
        model: Model to evaluate
        x: Input batch [batch x in_features]
        save: Keep per-layer inputs for the backward pass

    Returns:
        tuple: (output [batch x out_features], saved tensors, one per layer when ``save``)

    Raises:
        TensorShapeError: If x does not match the first layer's input width
    """
    if x.ndim != 2 or x.shape[1] != model.layers[0].in_features:
        raise TensorShapeError(
            f"Input shape {x.shape} does not match in_features={model.layers[0].in_features}"
        )
    h = x.astype(model.dtype, copy=False)
    activations = model.config.junction_activations()
    saved: List[SavedTensor] = []
    activated = False

    for position, layer in enumerate(model.layers):
        if save:
            saved.append(SavedTensor(layer.layer_index, h, layer.weight, activated))
        w_hat = layer.weight.reconstruct()
        with memory_tracker.hold(WEIGHT, w_hat.nbytes):
            h = matmul(h, w_hat.T)
        del w_hat

        activated = position < len(activations) and activations[position] == Activation.RELU
        if activated:
            h = relu(h)

    return h, saved


def loss_and_grad(output: Tensor, target: Tensor, kind: LossKind) -> Tuple[float, Tensor]:
    """Mean-over-batch loss and its gradient with respect to the output.

    ``mse`` is (1/B) * sum (y - t)^2; ``softmax-cross-entropy`` expects target
    rows that are probability vectors (one-hot for class labels).

    Raises:
        TensorShapeError: If output and target shapes differ
        NetworkError: If the loss kind is unknown
    """
    if output.shape != target.shape:
        raise TensorShapeError(f"Output shape {output.shape} does not match target {target.shape}")
    try:
        kind = LossKind(kind)
    except ValueError:
        raise NetworkError(f"Invalid loss kind: {kind}")

    batch = output.shape[0]
    dtype = output.dtype.type
    target = target.astype(output.dtype, copy=False)

    if kind == LossKind.MSE:
        diff = output - target
        loss = float(np.sum(diff.astype(np.float64) ** 2) / batch)
        return loss, diff * dtype(2.0 / batch)

    shifted = output - output.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    loss = float(-np.sum(target.astype(np.float64) * log_probs) / batch)
    return loss, (np.exp(log_probs) - target) * dtype(1.0 / batch)
