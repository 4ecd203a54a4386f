"""Memory accounting, threshold sweeps and state distribution statistics.

Two modes are provided. The analytic mode computes model-state bytes from a
parameter count for several training methods. The measured mode adds up the
bytes actually held by a live model, its optimizer state and the gradient
stack.
"""
import csv
import io
import math
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from src.config import settings, get_logger
from src.engine.gradflow import GradientStack
from src.engine.network import Model, SavedTensor
from src.engine.optimizer import AdamState, LionState, ReferenceLionState
from src.engine.quantizers import DenseSparseQuantizer, l2_distance, outlier_tail_count
from src.engine.tensor import Tensor
from src.schemas import (
    DistributionStats,
    MemoryProfile,
    ProfileConfig,
    ProfileMethod,
    SweepRow,
    ThresholdMode,
)

logger = get_logger(__name__)

GIB = 2 ** 30
GB = 10 ** 9
UNITS = {"gib": (GIB, "GiB"), "gb": (GB, "GB")}

FP32_BYTES = 4
ROW_PTR_BYTES = 4
CHANNEL_PARAM_BYTES = 8  # fp32 scale + int32 zero-point

OptimizerState = Union[LionState, ReferenceLionState, AdamState]


class ProfileError(ValueError):
    """Raised for invalid profile, sweep or statistics requests."""
    pass


def to_units(nbytes: int, units: str = "gib") -> float:
    """Convert bytes to GiB (2^30) or GB (10^9)."""
    try:
        divisor, _ = UNITS[units.lower()]
    except KeyError:
        raise ProfileError(f"Unknown units: {units}. Use one of {sorted(UNITS)}")
    return nbytes / divisor


def adam_model_state_bytes(param_count: int, fp_bytes: int = FP32_BYTES) -> int:
    """Weights, gradients, momentum and variances, all in floating point."""
    return 4 * param_count * fp_bytes


def _with_ratio(profile: MemoryProfile, param_count: int) -> MemoryProfile:
    profile.ratio_vs_adam = profile.model_state_bytes / adam_model_state_bytes(param_count)
    return profile


def analytic_profile(cfg: ProfileConfig, method: Union[ProfileMethod, str]) -> MemoryProfile:
    """Model-state bytes of a training method for ``cfg.param_count`` parameters.

    Args:
        cfg: Parameter count, element sizes and quantization knobs
        method: adam, adam-mixed, bitsandbytes, lion or qft

    Returns:
        MemoryProfile: Per-component bytes with ratio_vs_adam filled in

    Raises:
        ProfileError: If the method is unknown

    Example:
        >>> p = analytic_profile(ProfileConfig(param_count=6_738_000_000), "adam")
        >>> round(to_units(p.weights_bytes), 1), round(to_units(p.model_state_bytes), 1)
        (25.1, 100.4)
    """
    try:
        method = ProfileMethod(method)
    except ValueError:
        raise ProfileError(f"Invalid method: {method}. Use one of {[m.value for m in ProfileMethod]}")

    n = cfg.param_count
    full = n * cfg.fp_bytes
    half = n * cfg.half_bytes

    if method == ProfileMethod.ADAM:
        profile = MemoryProfile(
            method=method.value, weights_bytes=full, gradients_bytes=full,
            momentum_bytes=full, variances_bytes=full,
        )
    elif method == ProfileMethod.ADAM_MIXED:
        profile = MemoryProfile(
            method=method.value, weights_bytes=half, gradients_bytes=half,
            weight_copies_bytes=full, momentum_bytes=full, variances_bytes=full,
        )
    elif method == ProfileMethod.BITSANDBYTES:
        profile = MemoryProfile(
            method=method.value, weights_bytes=half, gradients_bytes=half,
            weight_copies_bytes=full, momentum_bytes=n * cfg.int_bytes,
            variances_bytes=n * cfg.int_bytes,
        )
    elif method == ProfileMethod.LION:
        profile = MemoryProfile(
            method=method.value, weights_bytes=full, gradients_bytes=full, momentum_bytes=full,
        )
    else:
        profile = _qft_analytic(cfg)

    profile.activation_bytes = cfg.activation_bytes
    return _with_ratio(profile, n)


def _qft_analytic(cfg: ProfileConfig) -> MemoryProfile:
    n = cfg.param_count
    p, u = cfg.outlier_fraction, cfg.unquantized_fraction
    channels = math.ceil(n / cfg.channel_size)

    quantized_state = n * (cfg.int_bytes * (1.0 - u) + cfg.fp_bytes * u)
    state_overhead = channels * cfg.channel_param_bytes

    weights = n * (
        cfg.int_bytes * (1.0 - p - u)
        + (cfg.fp_bytes + cfg.sparse_index_bytes) * p
        + cfg.fp_bytes * u
    )
    weight_overhead = channels * (cfg.channel_param_bytes + 2 * cfg.fp_bytes + ROW_PTR_BYTES)

    return MemoryProfile(
        method=ProfileMethod.QFT.value,
        weights_bytes=int(round(weights)) + weight_overhead,
        gradients_bytes=int(round(quantized_state)) + state_overhead,
        momentum_bytes=int(round(quantized_state)) + state_overhead,
    )


def analytic_profile_for_model(model: Model) -> MemoryProfile:
    """Analytic bytes for a concrete model using its real layer and channel counts.

    Outlier counts follow the percentile threshold rule, so for weights with
    distinct values the result matches measured_profile after a step.
    """
    if model.pass_through:
        itemsize = np.dtype(model.dtype).itemsize
        n = model.num_parameters * itemsize
        profile = MemoryProfile(
            method=ProfileMethod.LION.value, weights_bytes=n, gradients_bytes=n, momentum_bytes=n,
        )
        return _with_ratio(profile, model.num_parameters)

    itemsize = np.dtype(model.dtype).itemsize
    quant = model.quant
    weights = gradients = 0
    for layer in model.layers:
        rows, cols = layer.weight.shape
        channels = rows if quant.channel_wise else 1
        if quant.threshold_mode == ThresholdMode.PERCENTILE:
            nnz = 2 * outlier_tail_count(cols, quant.outlier_fraction) * rows
        else:
            nnz = int(round(quant.outlier_fraction * rows * cols))
        payload = rows * cols
        params = channels * CHANNEL_PARAM_BYTES
        weights += (
            payload + params + (rows + 1) * ROW_PTR_BYTES
            + nnz * (itemsize + ROW_PTR_BYTES) + 2 * rows * itemsize
        )
        gradients += payload + params

    profile = MemoryProfile(
        method=ProfileMethod.QFT.value,
        weights_bytes=weights,
        gradients_bytes=gradients,
        momentum_bytes=gradients,
    )
    return _with_ratio(profile, model.num_parameters)


def _method_for(model: Model, state: OptimizerState) -> str:
    if isinstance(state, AdamState):
        return ProfileMethod.ADAM.value
    if isinstance(state, LionState) and not model.pass_through:
        return ProfileMethod.QFT.value
    return ProfileMethod.LION.value


def measured_profile(
    model: Model,
    state: OptimizerState,
    stack: Optional[GradientStack] = None,
    saved: Optional[Sequence[SavedTensor]] = None,
) -> MemoryProfile:
    """Exact bytes held by a live model, its optimizer state and gradient stack.

    Args:
        model: Model whose stored weights are counted
        state: Optimizer state (quantized or floating-point)
        stack: Gradient stack; counted as it currently stands
        saved: Saved tensors of a forward pass, counted as activations

    Returns:
        MemoryProfile: Byte counts; the method is inferred from the state type
    """
    profile = MemoryProfile(
        method=_method_for(model, state),
        weights_bytes=sum(layer.weight.nbytes for layer in model.layers),
        gradients_bytes=stack.nbytes if stack is not None else 0,
        momentum_bytes=state.momentum_nbytes,
        variances_bytes=state.variances_nbytes,
        activation_bytes=sum(int(entry.inputs.nbytes) for entry in saved or ()),
    )
    return _with_ratio(profile, model.num_parameters)


def threshold_sweep(
    w: Tensor,
    fractions: Sequence[float],
    bit_width: Optional[int] = None,
    threshold_mode: ThresholdMode = ThresholdMode.PERCENTILE,
    channel_wise: bool = True,
) -> List[SweepRow]:
    """Decompose ``w`` at each outlier fraction and report bytes and L2 error.

    Raises:
        ProfileError: If fractions are empty or not sorted ascending
    """
    fractions = [float(p) for p in fractions]
    if not fractions:
        raise ProfileError("threshold_sweep needs at least one fraction")
    if any(b < a for a, b in zip(fractions, fractions[1:])):
        raise ProfileError(f"fractions must be sorted ascending, got {fractions}")

    rows = []
    for p in fractions:
        quantizer = DenseSparseQuantizer(
            bit_width=bit_width, outlier_fraction=p, threshold_mode=threshold_mode, channel_wise=channel_wise,
        )
        dsw = quantizer.decompose(w)
        rows.append(SweepRow(fraction=p, bytes=dsw.nbytes, l2=l2_distance(dsw.reconstruct(), w)))
        logger.debug("Sweep point", fraction=p, bytes=rows[-1].bytes, l2=rows[-1].l2)
    return rows


def distribution_stats(x: Tensor, k: Optional[float] = None) -> DistributionStats:
    """Summary statistics of a tensor's values.

    ``range_ratio`` is the full range over the central 99% range (0.5th to
    99.5th percentile); a constant tensor has ratio 1.

    Raises:
        ProfileError: If x is empty
    """
    if x.size == 0:
        raise ProfileError("distribution_stats of an empty tensor")
    k = settings.distribution_outlier_k if k is None else k
    values = np.asarray(x, dtype=np.float64).ravel()

    lo, hi = float(values.min()), float(values.max())
    mean = float(values.mean())
    mean = min(max(mean, lo), hi)
    stdev = float(values.std())
    c_lo, c_hi = np.quantile(values, [0.005, 0.995])
    central = float(c_hi - c_lo)
    full = hi - lo
    if full == 0.0:
        range_ratio = 1.0
    elif central == 0.0:
        range_ratio = math.inf
    else:
        range_ratio = max(full / central, 1.0)
    outliers = int(np.count_nonzero(np.abs(values - mean) > k * stdev)) if stdev > 0 else 0

    return DistributionStats(
        count=int(values.size), min=lo, max=hi, mean=mean, stdev=stdev,
        range_ratio=range_ratio, outlier_count=outliers, k=k,
    )


def state_distribution_report(
    model: Model,
    state: Optional[OptimizerState] = None,
    k: Optional[float] = None,
) -> Dict[str, DistributionStats]:
    """Distribution statistics of every layer's weight and momentum."""
    report = {}
    for position, layer in enumerate(model.layers):
        report[f"layer{layer.layer_index}.weight"] = distribution_stats(layer.weight.reconstruct(), k)
        if state is not None:
            momentum = state.momenta[position]
            values = momentum if isinstance(momentum, np.ndarray) else momentum.dequantize()
            report[f"layer{layer.layer_index}.momentum"] = distribution_stats(values, k)
    return report


def format_profile(profile: MemoryProfile, units: str = "gib") -> str:
    """key=value text report of a profile."""
    if units.lower() not in UNITS:
        raise ProfileError(f"Unknown units: {units}. Use one of {sorted(UNITS)}")
    label = UNITS[units.lower()][1]
    lines = [f"method={profile.method}", f"units={label}"]
    for name, nbytes in profile.components().items():
        lines.append(f"{name}={to_units(nbytes, units):.3f}")
    lines.append(f"model_states={to_units(profile.model_state_bytes, units):.3f}")
    lines.append(f"total={to_units(profile.total_bytes, units):.3f}")
    if profile.ratio_vs_adam is not None:
        lines.append(f"ratio_vs_adam={profile.ratio_vs_adam:.4f}")
    return "\n".join(lines)


def profiles_to_csv(profiles: Iterable[MemoryProfile]) -> str:
    """CSV with header ``method,component,bytes``."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["method", "component", "bytes"])
    for profile in profiles:
        for name, nbytes in profile.components().items():
            writer.writerow([profile.method, name, nbytes])
        writer.writerow([profile.method, "model_states", profile.model_state_bytes])
        writer.writerow([profile.method, "total", profile.total_bytes])
    return buffer.getvalue()


def sweep_to_csv(rows: Iterable[SweepRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["fraction", "bytes", "l2"])
    for row in rows:
        writer.writerow([row.fraction, row.bytes, repr(row.l2)])
    return buffer.getvalue()


def format_stats(name: str, stats: DistributionStats) -> str:
    return (
        f"tensor={name} count={stats.count} min={stats.min:.6g} max={stats.max:.6g} "
        f"mean={stats.mean:.6g} stdev={stats.stdev:.6g} range_ratio={stats.range_ratio:.4g} "
        f"outliers={stats.outlier_count} k={stats.k:g}"
    )


def heavy_tailed_tensor(
    rows: int = 64,
    cols: int = 1024,
    outlier_fraction: float = 0.005,
    seed: int = 0,
    dtype: str = "float32",
) -> Tensor:
    """Standard-normal tensor with a few entries at 100-1000x the standard deviation.

    Values are distinct with probability one, which keeps sweep byte counts
    strictly increasing in the outlier fraction.
    """
    if rows < 1 or cols < 1:
        raise ProfileError(f"rows and cols must be positive, got {rows}x{cols}")
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((rows, cols))
    count = int(round(outlier_fraction * w.size))
    if count:
        positions = rng.choice(w.size, size=count, replace=False)
        w.flat[positions] = rng.choice([-1.0, 1.0], size=count) * rng.uniform(100.0, 1000.0, size=count)
    return w.astype(dtype)
