"""Adaptive per-token KV-cache precision: codecs, saliency features, a learned
bit-width controller, a tiny reference decoder and a benchmark harness."""

from .kernels import BACKEND as KERNEL_BACKEND
from .quant import BitWidth, InvalidInputError, QuantizedVector, dequantize, quantize, storage_bits

__version__ = "0.1.0"

__all__ = [
    "KERNEL_BACKEND",
    "BitWidth",
    "InvalidInputError",
    "QuantizedVector",
    "dequantize",
    "quantize",
    "storage_bits",
]
