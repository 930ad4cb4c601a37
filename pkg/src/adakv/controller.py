"""Three-layer MLP that picks a bit-width class from saliency features.

File format (``.npz``-free so it can be read without numpy pickling)::

    magic      8 bytes   b"ADAKVCTL"
    version    uint32    FORMAT_VERSION
    n_arrays   uint32
    then for each array, in the order of ``ControllerParams.FIELDS``:
        ndim   uint32
        shape  ndim x uint32
        data   prod(shape) x float64

All integers and reals are little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .quant import BitWidth, InvalidInputError

N_FEATURES = 4
HIDDEN = 128
N_CLASSES = 4

MAGIC = b"ADAKVCTL"
FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class ControllerParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    feature_mean: np.ndarray
    feature_std: np.ndarray

    FIELDS = ("W1", "b1", "W2", "b2", "W3", "b3", "feature_mean", "feature_std")
    WEIGHTS = ("W1", "b1", "W2", "b2", "W3", "b3")

    def __post_init__(self):
        expected = {
            "W1": (HIDDEN, N_FEATURES), "b1": (HIDDEN,),
            "W2": (HIDDEN, HIDDEN), "b2": (HIDDEN,),
            "W3": (N_CLASSES, HIDDEN), "b3": (N_CLASSES,),
            "feature_mean": (N_FEATURES,), "feature_std": (N_FEATURES,),
        }
        for name, shape in expected.items():
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.shape != shape:
                raise InvalidInputError(f"{name} has shape {a.shape}, expected {shape}")
            if not np.all(np.isfinite(a)):
                raise InvalidInputError(f"{name} contains non-finite entries")
            object.__setattr__(self, name, a)

    @property
    def stats(self):
        return self.feature_mean, self.feature_std

    def weights(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.WEIGHTS}

    def with_weights(self, **arrays) -> "ControllerParams":
        return replace(self, **arrays)

    def __eq__(self, other):
        if not isinstance(other, ControllerParams):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in self.FIELDS)

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(self.FIELDS))]
        for name in self.FIELDS:
            a = getattr(self, name)
            parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
            parts.append(a.astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ControllerParams":
        if blob[:8] != MAGIC:
            raise InvalidInputError("not a controller file (bad magic)")
        version, count = struct.unpack_from("<II", blob, 8)
        if version != FORMAT_VERSION:
            raise InvalidInputError(f"unsupported controller format version {version}")
        if count != len(cls.FIELDS):
            raise InvalidInputError(f"expected {len(cls.FIELDS)} arrays, file has {count}")
        off = 16
        arrays = {}
        for name in cls.FIELDS:
            (ndim,) = struct.unpack_from("<I", blob, off)
            shape = struct.unpack_from(f"<{ndim}I", blob, off + 4)
            off += 4 + 4 * ndim
            size = int(np.prod(shape)) * 8
            if off + size > len(blob):
                raise InvalidInputError("controller file is truncated")
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=size // 8, offset=off).reshape(shape).copy()
            off += size
        if off != len(blob):
            raise InvalidInputError("trailing bytes in controller file")
        return cls(**arrays)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ControllerParams":
        return cls.from_bytes(Path(path).read_bytes())


def init_params(seed: int) -> ControllerParams:
    """Glorot-uniform weights, zero biases, identity feature statistics."""
    rng = np.random.default_rng(seed)

    def glorot(fan_out, fan_in):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_out, fan_in))

    return ControllerParams(
        W1=glorot(HIDDEN, N_FEATURES), b1=np.zeros(HIDDEN),
        W2=glorot(HIDDEN, HIDDEN), b2=np.zeros(HIDDEN),
        W3=glorot(N_CLASSES, HIDDEN), b3=np.zeros(N_CLASSES),
        feature_mean=np.zeros(N_FEATURES), feature_std=np.ones(N_FEATURES),
    )


def zero_params() -> ControllerParams:
    return ControllerParams(
        W1=np.zeros((HIDDEN, N_FEATURES)), b1=np.zeros(HIDDEN),
        W2=np.zeros((HIDDEN, HIDDEN)), b2=np.zeros(HIDDEN),
        W3=np.zeros((N_CLASSES, HIDDEN)), b3=np.zeros(N_CLASSES),
        feature_mean=np.zeros(N_FEATURES), feature_std=np.ones(N_FEATURES),
    )


def forward_batch(params: ControllerParams, S: np.ndarray):
    """Batched forward pass on standardized features ``S`` (n x 4).

    Returns ``(logits, (pre1, h1, pre2, h2))``; the cache feeds backprop.
    """
    S = np.asarray(S, dtype=np.float64)
    if not np.all(np.isfinite(S)):
        raise InvalidInputError("features contain non-finite entries")
    pre1 = S @ params.W1.T + params.b1
    h1 = np.maximum(pre1, 0.0)
    pre2 = h1 @ params.W2.T + params.b2
    h2 = np.maximum(pre2, 0.0)
    logits = h2 @ params.W3.T + params.b3
    return logits, (pre1, h1, pre2, h2)


def forward(params: ControllerParams, s) -> np.ndarray:
    """Class logits for one standardized feature vector."""
    s = s.as_array() if hasattr(s, "as_array") else np.asarray(s, dtype=np.float64)
    logits, _ = forward_batch(params, s[None, :])
    return logits[0]


def class_probs(o) -> np.ndarray:
    o = np.asarray(o, dtype=np.float64)
    e = np.exp(o - o.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def select_bitwidth(p) -> BitWidth:
    # np.argmax returns the first maximum, i.e. the lowest tied bit-width
    return BitWidth.from_index(int(np.argmax(np.asarray(p))))


def predict(params: ControllerParams, raw_features) -> BitWidth:
    """Bit-width for raw (unstandardized) features."""
    raw = raw_features.as_array() if hasattr(raw_features, "as_array") else raw_features
    s = (np.asarray(raw, dtype=np.float64) - params.feature_mean) / np.maximum(params.feature_std, 1e-8)
    return select_bitwidth(class_probs(forward(params, s)))
