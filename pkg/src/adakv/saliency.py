"""Per-token saliency features: entropy, rarity, attention variance, confidence."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .quant import InvalidInputError

FEATURE_NAMES = ("entropy", "rarity", "attention_variance", "confidence")
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class SaliencyFeatures:
    entropy: float
    rarity: float
    attention_variance: float
    confidence: float

    def as_array(self) -> np.ndarray:
        return np.array([self.entropy, self.rarity, self.attention_variance, self.confidence])

    @classmethod
    def from_array(cls, a) -> "SaliencyFeatures":
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (4,):
            raise InvalidInputError(f"feature vector must have 4 entries, got shape {a.shape}")
        return cls(*(float(v) for v in a))


@dataclass
class TokenCounter:
    """Running token counts for one stream."""

    counts: Counter = field(default_factory=Counter)
    total: int = 0

    @property
    def distinct(self) -> int:
        return len(self.counts)

    def count(self, token: int) -> int:
        return self.counts.get(token, 0)

    def update(self, token: int) -> None:
        self.counts[token] += 1
        self.total += 1

    def copy(self) -> "TokenCounter":
        return TokenCounter(Counter(self.counts), self.total)

    def entropy_bits(self) -> float:
        """Shannon entropy (base 2) of the empirical token distribution."""
        if self.total == 0:
            return 0.0
        p = np.array(list(self.counts.values()), dtype=np.float64) / self.total
        return float(-(p * np.log2(p)).sum())


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def _check_logits(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size < 2:
        raise InvalidInputError("logits must be a vector over at least 2 symbols")
    if not np.all(np.isfinite(logits)):
        raise InvalidInputError("logits contain non-finite entries")
    return logits


def entropy(logits) -> float:
    """Entropy in nats of softmax(logits)."""
    p = _softmax(_check_logits(logits))
    nz = p[p > 0]
    return float(max(0.0, -(nz * np.log(nz)).sum()))


def confidence(logits) -> float:
    return float(_softmax(_check_logits(logits)).max())


def rarity(token: int, counter: TokenCounter) -> float:
    # evaluated before ``token`` is added to the counter
    num = counter.count(token) + 1
    den = counter.total + counter.distinct + 1
    return -math.log(num / den)


def attention_variance(attn) -> float:
    """Mean over heads of the population variance of each head's matrix."""
    attn = np.asarray(attn, dtype=np.float64)
    if attn.size == 0 or attn.ndim != 3:
        raise InvalidInputError("attention tensor must be a non-empty h x l x l array")
    flat = attn.reshape(attn.shape[0], -1)
    return float(flat.var(axis=1).mean())


def causal_variance(sumsq: np.ndarray, length: int) -> float:
    """``attention_variance`` of an h x l x l causal matrix from its row statistics.

    ``sumsq[i]`` is the sum of squared entries of head ``i``; rows sum to one,
    so the mean entry is ``1/l`` and only the second moment needs tracking.
    """
    var = np.asarray(sumsq) / length**2 - 1.0 / length**2
    return float(np.maximum(var, 0.0).mean())


def standardize(x, stats) -> np.ndarray:
    mean, std = stats
    return (np.asarray(x, dtype=np.float64) - mean) / np.maximum(std, STD_FLOOR)


def build_features(logits, token, counter, attn, stats=None):
    """Assemble ``[H, R, V, C]``.

    Returns a :class:`SaliencyFeatures` for raw features, or the standardized
    4-vector when ``stats = (mean, std)`` is supplied.
    """
    logits = _check_logits(logits)
    feats = SaliencyFeatures(
        entropy(logits), rarity(token, counter), attention_variance(attn), confidence(logits)
    )
    if stats is None:
        return feats
    return standardize(feats.as_array(), stats)
