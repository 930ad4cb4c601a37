"""Seeded tiny causal decoder with a heterogeneous-precision KV cache."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .controller import ControllerParams, predict
from .quant import BitWidth, InvalidInputError, QuantizedVector, entry_bits, quantize_rows
from .saliency import SaliencyFeatures, TokenCounter, causal_variance, confidence, entropy, rarity


@dataclass(frozen=True)
class TinyModelConfig:
    vocab: int = 64
    d_model: int = 32
    heads: int = 2
    head_dim: int = 16
    layers: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab", "d_model", "heads", "head_dim", "layers"):
            if int(getattr(self, name)) <= 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.heads * self.head_dim != self.d_model:
            raise InvalidInputError(
                f"heads * head_dim = {self.heads * self.head_dim} does not match d_model = {self.d_model}"
            )


@dataclass(frozen=True, eq=False)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass(frozen=True, eq=False)
class TinyModel:
    config: TinyModelConfig
    embedding: np.ndarray
    layers: tuple

    def positional(self, t: int) -> np.ndarray:
        d = self.config.d_model
        i = np.arange(0, d, 2)
        angle = t / np.power(10000.0, i / d)
        pe = np.empty(d)
        pe[0::2] = np.sin(angle)
        pe[1::2] = np.cos(angle[: d // 2])
        return pe


def build_model(config: TinyModelConfig) -> TinyModel:
    rng = np.random.default_rng(config.seed)
    d = config.d_model

    def u(*shape):
        return rng.uniform(-0.1, 0.1, size=shape)

    embedding = u(config.vocab, d)
    layers = tuple(
        LayerWeights(u(d, d), u(d, d), u(d, d), u(d, d), u(d, 4 * d), u(4 * d, d))
        for _ in range(config.layers)
    )
    return TinyModel(config, embedding, layers)


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / np.sqrt(var + 1e-5)


# ---------------------------------------------------------------------------
# cache


class _LayerStore:
    """Growable packed storage for one layer: payload/scale/zero per K and V."""

    def __init__(self, heads, head_dim, capacity=64):
        self.h, self.d = heads, head_dim
        self.n = 0
        self._alloc(capacity)

    def _alloc(self, cap):
        h, d = self.h, self.d
        self.k_pay = np.zeros((cap, h, d)); self.k_scale = np.zeros((cap, h)); self.k_zero = np.zeros((cap, h))
        self.v_pay = np.zeros((cap, h, d)); self.v_scale = np.zeros((cap, h)); self.v_zero = np.zeros((cap, h))
        # exact K/V kept alongside for distortion measurement; never counted as storage
        self.k_raw = np.zeros((cap, h, d)); self.v_raw = np.zeros((cap, h, d))
        self.ones = np.ones((cap, h)); self.zeros = np.zeros((cap, h))

    def _grow(self):
        old = {k: v for k, v in vars(self).items() if isinstance(v, np.ndarray)}
        self._alloc(2 * old["k_pay"].shape[0])
        for k, v in old.items():
            getattr(self, k)[: v.shape[0]] = v

    def append(self, k, v, bits):
        if self.n == self.k_pay.shape[0]:
            self._grow()
        t = self.n
        self.k_pay[t], self.k_scale[t], self.k_zero[t] = quantize_rows(k, bits)
        self.v_pay[t], self.v_scale[t], self.v_zero[t] = quantize_rows(v, bits)
        self.k_raw[t] = k
        self.v_raw[t] = v
        self.n += 1

    def attend(self, q, self_k=None, self_v=None):
        n = self.n
        return kernels.hetero_attention(
            q, self.k_pay, self.k_scale, self.k_zero, self.v_pay, self.v_scale, self.v_zero,
            n, self_k, self_v,
        )

    def attend_exact(self, q, self_k=None, self_v=None):
        n = self.n
        return kernels.hetero_attention(
            q, self.k_raw, self.ones, self.zeros, self.v_raw, self.ones, self.zeros,
            n, self_k, self_v,
        )

    def entry(self, t, which):
        pay, scale, zero = (
            (self.k_pay, self.k_scale, self.k_zero) if which == "k" else (self.v_pay, self.v_scale, self.v_zero)
        )
        return pay[t], scale[t], zero[t]


class HeteroKVCache:
    """Append-only per-layer K/V store with one bit-width per position."""

    def __init__(self, layers: int, heads: int, head_dim: int):
        self.heads, self.head_dim = heads, head_dim
        self.stores = [_LayerStore(heads, head_dim) for _ in range(layers)]
        self.bits: list[BitWidth] = []

    def __len__(self):
        return len(self.bits)

    def append(self, keys, values, bits) -> None:
        """Quantize and append one position. ``keys[l]`` is the h x d key block of layer ``l``."""
        bits = BitWidth.parse(bits)
        if len(keys) != len(self.stores) or len(values) != len(self.stores):
            raise InvalidInputError("need one key/value block per layer")
        for store, k, v in zip(self.stores, keys, values):
            store.append(np.asarray(k, dtype=np.float64), np.asarray(v, dtype=np.float64), bits)
        self.bits.append(bits)

    def entry(self, layer: int, position: int, head: int, which: str = "k") -> QuantizedVector:
        bits = self.bits[position]
        pay, scale, zero = self.stores[layer].entry(position, which)
        if bits == BitWidth.B16:
            return QuantizedVector(bits, None, pay[head].astype(np.float16), 1.0, 0.0)
        return QuantizedVector(bits, pay[head].astype(np.uint8), None, float(scale[head]), float(zero[head]))

    def storage_bits(self) -> int:
        per_layer = sum(entry_bits(self.head_dim, b) for b in self.bits)
        # key + value, every head, every layer
        return 2 * self.heads * len(self.stores) * per_layer


def attention_with_hetero_cache(query, cache: HeteroKVCache, layer: int, self_kv=None) -> np.ndarray:
    """Attention of ``query`` (h x d) over ``cache`` at ``layer``, heads concatenated.

    ``self_kv = (k, v)`` adds the current token's own exact key/value.
    """
    q = np.ascontiguousarray(query, dtype=np.float64)
    sk, sv = self_kv if self_kv is not None else (None, None)
    out, _ = cache.stores[layer].attend(q, sk, sv)
    return out.reshape(-1)


# ---------------------------------------------------------------------------
# policies


@dataclass(frozen=True)
class PrecisionPolicy:
    kind: str
    bits: BitWidth | None = None
    thresholds: tuple | None = None
    controller: ControllerParams | None = field(default=None, compare=False)
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("full16", "static", "rule", "adaptive"):
            raise InvalidInputError(f"unknown policy kind {self.kind!r}")
        if self.kind == "static":
            object.__setattr__(self, "bits", BitWidth.parse(self.bits))
        if self.kind == "rule":
            t = tuple(float(x) for x in self.thresholds or ())
            if len(t) != 3 or not (t[0] < t[1] < t[2]):
                raise InvalidInputError("rule thresholds must be 3 strictly increasing reals")
            object.__setattr__(self, "thresholds", t)
        if self.kind == "adaptive" and self.controller is None:
            raise InvalidInputError("adaptive policy needs controller parameters")
        if not self.name:
            label = {"full16": "full16", "rule": "rule", "adaptive": "adaptive"}.get(self.kind)
            object.__setattr__(self, "name", label or f"static{int(self.bits)}")

    @classmethod
    def full16(cls):
        return cls("full16")

    @classmethod
    def static(cls, bits):
        return cls("static", bits=bits)

    @classmethod
    def rule(cls, thresholds):
        return cls("rule", thresholds=tuple(thresholds))

    @classmethod
    def adaptive(cls, controller):
        return cls("adaptive", controller=controller)


def apply_policy(policy: PrecisionPolicy, features: SaliencyFeatures) -> BitWidth:
    if policy.kind == "full16":
        return BitWidth.B16
    if policy.kind == "static":
        return policy.bits
    if policy.kind == "rule":
        h = features.entropy
        for t, b in zip(policy.thresholds, (BitWidth.B2, BitWidth.B4, BitWidth.B8)):
            if h < t:
                return b
        return BitWidth.B16
    return predict(policy.controller, features)


# ---------------------------------------------------------------------------
# decoding


@dataclass
class StepRecord:
    token: int
    bits: BitWidth
    features: SaliencyFeatures
    storage_bits: int
    next_token: int
    distortion: float = 0.0
    reference_next_token: int | None = None


@dataclass
class DecodeTrace:
    steps: list = field(default_factory=list)
    prompt_length: int = 0
    reference_tokens: list | None = None

    def __len__(self):
        return len(self.steps)

    @property
    def bits(self) -> list[int]:
        return [int(s.bits) for s in self.steps]

    @property
    def tokens(self) -> list[int]:
        return [s.token for s in self.steps]


class DecodeSession:
    """Single-writer decode state: model reference, cache, counter, attention statistics."""

    def __init__(self, model: TinyModel, policy: PrecisionPolicy, counter: TokenCounter | None = None,
                 track_distortion: bool = False, record_kv: bool = False, exact: bool = False):
        c = model.config
        self.model = model
        self.policy = policy
        self.counter = counter if counter is not None else TokenCounter()
        self.cache = HeteroKVCache(c.layers, c.heads, c.head_dim)
        self.track_distortion = track_distortion
        self.record_kv = record_kv
        self.exact = exact  # attend over the unquantized K/V: the reference path
        self.queries: list = []  # per position: layers x h x d, when record_kv
        self._sumsq = np.zeros(c.heads)  # final-layer attention second moment

    @property
    def position(self) -> int:
        return len(self.cache)

    def step(self, token: int):
        """Feed one token. Returns ``(logits, bits, features, distortion)``."""
        m = self.model
        c = m.config
        if not 0 <= int(token) < c.vocab:
            raise InvalidInputError(f"token id {token} outside vocabulary of size {c.vocab}")
        t = self.position
        x = m.embedding[token] + m.positional(t)
        keys, values, qs = [], [], []
        dist_num = dist_den = 0.0
        last_sumsq = None
        for li, w in enumerate(m.layers):
            u = _layer_norm(x)
            q = (u @ w.wq).reshape(c.heads, c.head_dim)
            k = (u @ w.wk).reshape(c.heads, c.head_dim)
            v = (u @ w.wv).reshape(c.heads, c.head_dim)
            store = self.cache.stores[li]
            out, sumsq = (store.attend_exact if self.exact else store.attend)(q, k, v)
            if self.track_distortion and not self.exact:
                ref, _ = store.attend_exact(q, k, v)
                dist_num += float(np.linalg.norm(out - ref))
                dist_den += float(np.linalg.norm(ref))
            x = x + out.reshape(-1) @ w.wo
            x = x + np.maximum(_layer_norm(x) @ w.w_up, 0.0) @ w.w_down
            keys.append(k); values.append(v); qs.append(q)
            last_sumsq = sumsq
        logits = _layer_norm(x) @ m.embedding.T

        self._sumsq += last_sumsq
        feats = SaliencyFeatures(
            entropy(logits), rarity(token, self.counter),
            causal_variance(self._sumsq, t + 1), confidence(logits),
        )
        self.counter.update(token)
        bits = apply_policy(self.policy, feats)
        self.cache.append(keys, values, bits)
        if self.record_kv:
            self.queries.append(np.stack(qs))
        distortion = dist_num / dist_den if dist_den > 0 else 0.0
        return logits, bits, feats, distortion


def decode_step(model, cache_or_session, token, policy=None, counter=None):
    """One decode step. Returns ``(logits, bits, features)``.

    Accepts a :class:`DecodeSession`; the cache, policy and counter live on it.
    """
    session = cache_or_session
    if not isinstance(session, DecodeSession):
        raise InvalidInputError("decode_step needs a DecodeSession")
    logits, bits, feats, _ = session.step(token)
    return logits, bits, feats


@dataclass(frozen=True)
class ReferenceRun:
    """Exact greedy decode: tokens fed at each position and the exact argmax after each."""

    tokens: tuple
    predictions: tuple
    prompt_length: int


def reference_decode(model: TinyModel, prompt, n_steps: int) -> ReferenceRun:
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise InvalidInputError("prompt must be non-empty")
    session = DecodeSession(model, PrecisionPolicy.full16(), TokenCounter(), exact=True)
    feed, preds = list(prompt), []
    for i in range(len(prompt) + n_steps):
        logits = session.step(feed[i])[0]
        preds.append(int(np.argmax(logits)))
        if i + 1 >= len(feed):
            feed.append(preds[-1])
    return ReferenceRun(tuple(feed[: len(prompt) + n_steps]), tuple(preds), len(prompt))


def generate(model: TinyModel, prompt, n_steps: int, policy: PrecisionPolicy,
             reference=False, counter: TokenCounter | None = None) -> DecodeTrace:
    """Prefill ``prompt`` then decode ``n_steps`` greedy tokens.

    Prefill runs token by token; under causal masking this matches a one-shot
    pass, and every prompt token's K/V goes through ``policy``.

    ``reference=True`` (or a precomputed :class:`ReferenceRun`) switches to
    dual-run mode: the exact decode drives the token stream, the policy path
    is fed the same tokens, and both greedy choices are recorded per step.
    """
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise InvalidInputError("prompt must be non-empty")
    if reference is True:
        reference = reference_decode(model, prompt, n_steps)
    ref = reference or None
    if ref is not None and (list(ref.tokens[: len(prompt)]) != prompt or len(ref.tokens) != len(prompt) + n_steps):
        raise InvalidInputError("reference run does not match prompt / step count")

    session = DecodeSession(model, policy, counter, track_distortion=ref is not None)
    c = model.config
    trace = DecodeTrace(prompt_length=len(prompt),
                        reference_tokens=list(ref.predictions) if ref is not None else None)
    feed = list(ref.tokens) if ref is not None else list(prompt)
    for i in range(len(prompt) + n_steps):
        token = feed[i]
        logits, bits, feats, dist = session.step(token)
        nxt = int(np.argmax(logits))
        trace.steps.append(StepRecord(
            token=token, bits=bits, features=feats,
            storage_bits=2 * c.heads * c.layers * entry_bits(c.head_dim, bits),
            next_token=nxt, distortion=dist,
            reference_next_token=ref.predictions[i] if ref is not None else None,
        ))
        if i + 1 >= len(feed):
            feed.append(nxt)
    return trace
