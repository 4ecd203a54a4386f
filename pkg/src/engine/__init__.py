"""Quantized training engine: tensors, quantizers, network, gradient flow, optimizers, profiling."""
