"""Oracle labels, the composite controller loss, and the Adam training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .controller import (
    ControllerParams,
    N_CLASSES,
    class_probs,
    forward_batch,
    init_params,
)
from .quant import ALL_WIDTHS, BitWidth, InvalidInputError, quantize_rows
from .engine import DecodeSession, PrecisionPolicy
from .saliency import STD_FLOOR, SaliencyFeatures, TokenCounter

log = logging.getLogger(__name__)

DEFAULT_COST = (0.125, 0.25, 0.5, 1.0)


@dataclass(frozen=True)
class TrainingSample:
    features: SaliencyFeatures
    label: BitWidth
    latency: float
    quality: float

    def __post_init__(self):
        object.__setattr__(self, "label", BitWidth.parse(self.label))
        if not 0.0 <= self.quality <= 1.0:
            raise InvalidInputError(f"quality {self.quality} outside [0, 1]")
        if self.latency < 0:
            raise InvalidInputError("latency must be non-negative")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 0.1
    cost: tuple = DEFAULT_COST
    quality_scores: tuple = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise InvalidInputError("loss weights must be non-negative")
        c = np.asarray(self.cost, dtype=np.float64)
        if c.shape != (4,) or np.any(np.diff(c) <= 0):
            raise InvalidInputError("cost must be 4 strictly increasing reals")
        q = np.asarray(self.quality_scores, dtype=np.float64)
        if q.shape != (4,) or np.any(q < 0) or np.any(q > 1):
            raise InvalidInputError("quality scores must be 4 reals in [0, 1]")
        object.__setattr__(self, "cost", tuple(float(x) for x in c))
        object.__setattr__(self, "quality_scores", tuple(float(x) for x in q))


# ---------------------------------------------------------------------------
# oracle labels


def _attention_outputs(queries, keys, values, mask):
    # queries (L, P, h, d); keys/values (L, n, h, d); mask (P, n) or None
    d = queries.shape[-1]
    scores = np.einsum("lphd,lnhd->lphn", queries, keys) / math.sqrt(d)
    if mask is not None:
        scores = np.where(mask[None, :, None, :], scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    return np.einsum("lphn,lnhd->lphd", w, values)


def attention_distortions(keys, values, queries, position, query_positions=None):
    """Relative L2 change of the probe attention outputs, one entry per bit-width.

    Only the token at ``position`` is quantized; every other key/value stays
    exact. ``keys``/``values`` are (layers, n, h, d), ``queries`` are
    (layers, probes, h, d). With ``query_positions`` each probe only sees keys
    at or before its own position.
    """
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 4 or queries.shape[1] == 0:
        raise InvalidInputError("probe query set is empty")
    mask = None
    if query_positions is not None:
        mask = np.arange(keys.shape[1])[None, :] <= np.asarray(query_positions)[:, None]
    exact = _attention_outputs(queries, keys, values, mask)
    norm = np.linalg.norm(exact)
    out = np.empty(len(ALL_WIDTHS))
    for i, b in enumerate(ALL_WIDTHS):
        kq, vq = keys.copy(), values.copy()
        for li in range(keys.shape[0]):
            for arr, src in ((kq, keys), (vq, values)):
                pay, scale, zero = quantize_rows(src[li, position], b)
                arr[li, position] = zero[:, None] + scale[:, None] * pay
        approx = _attention_outputs(queries, kq, vq, mask)
        out[i] = np.linalg.norm(approx - exact) / norm if norm > 0 else 0.0
    return out


def oracle_label(keys, values, queries, position, tau=0.05, query_positions=None,
                 per_token_budget=True):
    """Smallest bit-width whose distortion stays within ``tau``.

    With ``per_token_budget`` the single-token distortion is multiplied by the
    context length ``n`` before comparison, i.e. each token gets a ``tau / n``
    share so that (by the triangle inequality) all ``n`` tokens together stay
    within ``tau``. Without it the raw single-token distortion is compared to
    ``tau`` directly. Returns ``(label, quality per class)``.
    """
    if tau < 0:
        raise InvalidInputError("tau must be non-negative")
    dist = attention_distortions(keys, values, queries, position, query_positions)
    if per_token_budget:
        dist = dist * np.asarray(keys).shape[1]
    quality = np.maximum(0.0, 1.0 - dist)
    label = BitWidth.B16
    for b, d in zip(ALL_WIDTHS, dist):
        if d <= tau:
            label = b
            break
    return label, quality


# ---------------------------------------------------------------------------
# loss and gradients


def _unpack(batch):
    X = np.array([s.features.as_array() for s in batch], dtype=np.float64)
    y = np.array([BitWidth.parse(s.label).index for s in batch], dtype=np.int64)
    return X, y


def standardized_batch(batch, params: ControllerParams):
    if not batch:
        raise InvalidInputError("batch is empty")
    X, y = _unpack(batch)
    return (X - params.feature_mean) / np.maximum(params.feature_std, STD_FLOOR), y


def _loss_terms(logits, y, w: LossWeights):
    p = class_probs(logits)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(y)
    ce = -logp[np.arange(n), y].mean()
    c = np.asarray(w.cost)
    q = np.asarray(w.quality_scores)
    lat = (p @ c).mean()
    qual = 1.0 - (p @ q).mean()
    return p, ce, lat, qual


def total_loss(batch, params: ControllerParams, w: LossWeights):
    """``(L, L_ce, L_lat, L_qual)`` for a batch of raw samples."""
    S, y = standardized_batch(batch, params)
    return loss_from_arrays(S, y, params, w)


def loss_from_arrays(S, y, params, w):
    logits, _ = forward_batch(params, S)
    _, ce, lat, qual = _loss_terms(logits, y, w)
    return w.alpha * ce + w.beta * lat + w.gamma * qual, ce, lat, qual


def gradients(batch, params: ControllerParams, w: LossWeights) -> dict[str, np.ndarray]:
    S, y = standardized_batch(batch, params)
    return gradients_from_arrays(S, y, params, w)


def gradients_from_arrays(S, y, params, w):
    logits, (pre1, h1, pre2, h2) = forward_batch(params, S)
    p, _, _, _ = _loss_terms(logits, y, w)
    n = len(y)
    c = np.asarray(w.cost)
    q = np.asarray(w.quality_scores)

    onehot = np.zeros_like(p)
    onehot[np.arange(n), y] = 1.0
    # d/do of sum_k p_k v_k is p * (v - p.v)
    g = w.alpha * (p - onehot)
    g += w.beta * p * (c - (p @ c)[:, None])
    g -= w.gamma * p * (q - (p @ q)[:, None])
    g /= n

    grads = {"W3": g.T @ h2, "b3": g.sum(axis=0)}
    g2 = (g @ params.W3) * (pre2 > 0)
    grads["W2"] = g2.T @ h1
    grads["b2"] = g2.sum(axis=0)
    g1 = (g2 @ params.W2) * (pre1 > 0)
    grads["W1"] = g1.T @ S
    grads["b1"] = g1.sum(axis=0)
    return grads


# ---------------------------------------------------------------------------
# data handling


def stratified_split(dataset, ratio=0.8, seed=0):
    """Per-class shuffle, ``floor(ratio * n)`` to train, the rest to validation.

    Classes with two or more samples always keep at least one validation
    sample. Returns ``(train, validation)`` preserving no particular order.
    """
    if not dataset:
        raise InvalidInputError("dataset is empty")
    if not 0 < ratio < 1:
        raise InvalidInputError("ratio must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list] = {}
    for s in dataset:
        by_class.setdefault(int(s.label), []).append(s)
    train, val = [], []
    for label in sorted(by_class):
        items = by_class[label]
        order = rng.permutation(len(items))
        n_train = math.floor(ratio * len(items))
        if len(items) >= 2:
            n_train = min(n_train, len(items) - 1)
        else:
            n_train = len(items)
            log.warning("class %d-bit has a single sample; validation lacks this class", label)
        train.extend(items[i] for i in order[:n_train])
        val.extend(items[i] for i in order[n_train:])
    return train, val


def estimate_quality_scores(train) -> np.ndarray:
    """Mean sample quality per class; gaps filled by interpolation over class index."""
    if not train:
        raise InvalidInputError("training set is empty")
    sums = np.zeros(N_CLASSES)
    counts = np.zeros(N_CLASSES)
    for s in train:
        k = BitWidth.parse(s.label).index
        sums[k] += s.quality
        counts[k] += 1
    q = np.full(N_CLASSES, np.nan)
    seen = counts > 0
    q[seen] = sums[seen] / counts[seen]
    if np.isnan(q[-1]):
        q[-1] = 1.0
    known = np.flatnonzero(~np.isnan(q))
    # np.interp holds the end values flat below the lowest known class
    return np.interp(np.arange(N_CLASSES), known, q[known])


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ControllerParams, **kw) -> "AdamState":
        w = params.weights()
        return cls({k: np.zeros_like(a) for k, a in w.items()}, {k: np.zeros_like(a) for k, a in w.items()}, **kw)


def adam_step(params: ControllerParams, grads: dict, state: AdamState):
    weights = params.weights()
    if set(grads) != set(weights):
        raise InvalidInputError("gradient keys do not match parameters")
    for k, g in grads.items():
        if g.shape != weights[k].shape:
            raise InvalidInputError(f"gradient for {k} has shape {g.shape}, expected {weights[k].shape}")
    t = state.step + 1
    m, v, new = {}, {}, {}
    for k, g in grads.items():
        m[k] = state.beta1 * state.m[k] + (1 - state.beta1) * g
        v[k] = state.beta2 * state.v[k] + (1 - state.beta2) * g * g
        m_hat = m[k] / (1 - state.beta1**t)
        v_hat = v[k] / (1 - state.beta2**t)
        new[k] = weights[k] - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
    return params.with_weights(**new), new_state


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    lr: float = 1e-3
    split_ratio: float = 0.8
    patience: int | None = 10
    weights: LossWeights = field(default_factory=LossWeights)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    val_expected_cost: float


def _feature_stats(train):
    X = np.array([s.features.as_array() for s in train])
    return X.mean(axis=0), np.maximum(X.std(axis=0), STD_FLOOR)


def evaluate(params, samples, w: LossWeights):
    """Loss, class accuracy and expected cost ``mean sum_k p_k c_k``."""
    if not samples:
        return float("nan"), float("nan"), float("nan")
    S, y = standardized_batch(samples, params)
    logits, _ = forward_batch(params, S)
    L, _, lat, _ = loss_from_arrays(S, y, params, w)
    acc = float((np.argmax(logits, axis=1) == y).mean())
    return float(L), acc, float(lat)


def train(dataset, config: TrainConfig | None = None):
    """Fit a controller. Returns ``(params, history)`` with one entry per epoch run."""
    config = config or TrainConfig()
    train_set, val_set = stratified_split(dataset, config.split_ratio, config.seed)
    params = init_params(config.seed)
    mean, std = _feature_stats(train_set)
    params = params.with_weights(feature_mean=mean, feature_std=std)
    q = estimate_quality_scores(train_set)
    w = LossWeights(config.weights.alpha, config.weights.beta, config.weights.gamma,
                    config.weights.cost, tuple(q))

    S, y = standardized_batch(train_set, params)
    state = AdamState.zeros_like(params, lr=config.lr)
    rng = np.random.default_rng(config.seed + 1)
    history: list[EpochStats] = []
    best, best_loss, stale = params, math.inf, 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(y))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            losses.append(loss_from_arrays(S[idx], y[idx], params, w)[0])
            grads = gradients_from_arrays(S[idx], y[idx], params, w)
            params, state = adam_step(params, grads, state)
        val_loss, val_acc, val_cost = evaluate(params, val_set, w)
        history.append(EpochStats(epoch, float(np.mean(losses)), val_loss, val_acc, val_cost))
        log.debug("epoch %d loss %.4f val %.4f acc %.3f", epoch, history[-1].train_loss, val_loss, val_acc)
        if not val_set:
            best = params
            continue
        if val_loss < best_loss:
            best, best_loss, stale = params, val_loss, 0
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                break
    return best, history


# ---------------------------------------------------------------------------
# dataset file (JSONL)

_KEYS = {"features", "label", "latency", "quality"}


def sample_to_json(s: TrainingSample) -> str:
    return json.dumps({
        "features": [float(v) for v in s.features.as_array()],
        "label": int(s.label),
        "latency": float(s.latency),
        "quality": float(s.quality),
    })


def sample_from_json(line: str) -> TrainingSample:
    rec = json.loads(line)
    if not isinstance(rec, dict) or set(rec) != _KEYS:
        raise InvalidInputError(f"dataset record must have exactly the keys {sorted(_KEYS)}")
    feats = rec["features"]
    if not isinstance(feats, list) or len(feats) != 4 or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) for v in feats
    ):
        raise InvalidInputError("features must be a list of 4 finite numbers")
    label = rec["label"]
    if isinstance(label, bool) or not isinstance(label, int):
        raise InvalidInputError(f"label must be an integer bit-width, got {label!r}")
    for key in ("latency", "quality"):
        if isinstance(rec[key], bool) or not isinstance(rec[key], (int, float)):
            raise InvalidInputError(f"{key} must be a number")
    return TrainingSample(SaliencyFeatures(*map(float, feats)), BitWidth.parse(label),
                          float(rec["latency"]), float(rec["quality"]))


def write_dataset(samples, path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(sample_to_json(s) + "\n")


def read_dataset(path) -> list[TrainingSample]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(sample_from_json(line))
            except (InvalidInputError, json.JSONDecodeError) as exc:
                raise InvalidInputError(f"{path}:{lineno}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# dataset construction from decode runs


def label_sequence(model, prompt, n_steps, tau=0.05, window=16, cost=DEFAULT_COST,
                   per_token_budget=True, counter=None):
    """Oracle-label every token of one exact greedy decode.

    Each token is probed by the queries of itself and the next ``window``
    positions, over the causal context those probes can see. ``counter`` is
    updated in place so rarity carries over between calls.
    """
    session = DecodeSession(model, PrecisionPolicy.full16(), counter if counter is not None else TokenCounter(),
                            record_kv=True, exact=True)
    feats = []
    feed = [int(t) for t in prompt]
    for i in range(len(prompt) + n_steps):
        logits, _, f, _ = session.step(feed[i])
        feats.append(f)
        if i + 1 >= len(feed):
            feed.append(int(np.argmax(logits)))
    n = len(feats)
    K = np.stack([s.k_raw[:n] for s in session.cache.stores])
    V = np.stack([s.v_raw[:n] for s in session.cache.stores])
    Q = np.stack(session.queries, axis=1)
    samples = []
    for j in range(n):
        end = min(j + window, n - 1)
        label, quality = oracle_label(
            K[:, : end + 1], V[:, : end + 1], Q[:, j: end + 1], j, tau,
            query_positions=np.arange(j, end + 1), per_token_budget=per_token_budget,
        )
        samples.append(TrainingSample(feats[j], label, float(cost[label.index]), float(quality[label.index])))
    return samples


def build_dataset(model, prompts, n_steps, tau=0.05, window=16, cost=DEFAULT_COST,
                  per_token_budget=True):
    """Label a whole corpus; one token counter spans all prompts, as in a benchmark run."""
    counter = TokenCounter()
    out = []
    for p in prompts:
        out.extend(label_sequence(model, p, n_steps, tau, window, cost, per_token_budget, counter))
    return out
