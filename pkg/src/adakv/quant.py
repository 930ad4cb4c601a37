"""Affine codecs for cached key/value vectors.

Bit-widths 2, 4 and 8 use asymmetric min-max quantization with one scale and
one zero-point per vector. Width 16 stores the vector as IEEE half precision.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import kernels

# one half-precision scale plus one half-precision zero-point
PARAM_OVERHEAD_BITS = 32


class InvalidInputError(ValueError):
    """Raised when an operation receives malformed numeric input."""


class BitWidth(enum.IntEnum):
    B2 = 2
    B4 = 4
    B8 = 8
    B16 = 16

    @property
    def index(self) -> int:
        return _ORDER.index(self)

    @classmethod
    def from_index(cls, index: int) -> "BitWidth":
        return _ORDER[index]

    @classmethod
    def parse(cls, value) -> "BitWidth":
        try:
            return cls(int(value))
        except (TypeError, ValueError):
            raise InvalidInputError(f"bit-width must be one of 2, 4, 8, 16; got {value!r}") from None


_ORDER = (BitWidth.B2, BitWidth.B4, BitWidth.B8, BitWidth.B16)
ALL_WIDTHS = _ORDER


@dataclass(frozen=True, eq=False)
class QuantizedVector:
    """One quantized key or value vector.

    ``codes`` is set for widths below 16, ``halfwords`` for width 16.
    """

    bits: BitWidth
    codes: np.ndarray | None
    halfwords: np.ndarray | None
    scale: float
    zero_point: float

    def __len__(self):
        return len(self.codes if self.codes is not None else self.halfwords)

    def __eq__(self, other):
        if not isinstance(other, QuantizedVector):
            return NotImplemented
        mine = self.codes if self.codes is not None else self.halfwords
        theirs = other.codes if other.codes is not None else other.halfwords
        return (
            self.bits == other.bits
            and self.scale == other.scale
            and self.zero_point == other.zero_point
            and mine.dtype == theirs.dtype
            and np.array_equal(mine, theirs)
        )


def _check_vector(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise InvalidInputError("expected a non-empty 1-d vector")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("vector contains non-finite entries")
    return x


def to_half(x: np.ndarray) -> np.ndarray:
    """Round to the nearest half-precision value; overflow is an input error."""
    with np.errstate(over="ignore"):
        h = x.astype(np.float16)
    if not np.all(np.isfinite(h)):
        raise InvalidInputError("value outside half-precision range")
    return h


def quantize(x, bits) -> QuantizedVector:
    bits = BitWidth.parse(bits)
    x = _check_vector(x)
    if bits == BitWidth.B16:
        return QuantizedVector(bits, None, to_half(x), 1.0, 0.0)
    codes, scale, zero = kernels.quantize_rows(x[None, :], int(bits))
    return QuantizedVector(bits, codes[0].astype(np.uint8), None, float(scale[0]), float(zero[0]))


def dequantize(q: QuantizedVector) -> np.ndarray:
    if q.bits == BitWidth.B16:
        return q.halfwords.astype(np.float64)
    return q.zero_point + q.scale * q.codes.astype(np.float64)


def storage_bits(q: QuantizedVector) -> int:
    return entry_bits(len(q), q.bits)


def entry_bits(dim: int, bits) -> int:
    """Stored size in bits of one ``dim``-element vector at width ``bits``."""
    bits = int(bits)
    return dim * bits + (0 if bits == 16 else PARAM_OVERHEAD_BITS)


def quantize_rows(x: np.ndarray, bits) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quantize each row of ``x`` independently.

    Returns ``(payload, scale, zero)`` such that ``zero + scale * payload``
    reconstructs every row. At width 16 the payload is the half-rounded
    value widened to float64, with scale 1 and zero 0.
    """
    bits = int(BitWidth.parse(bits))
    x = np.ascontiguousarray(x, dtype=np.float64)
    if bits == 16:
        n = x.shape[0]
        return to_half(x).astype(np.float64), np.ones(n), np.zeros(n)
    return kernels.quantize_rows(x, bits)
