"""Independent oracles shared by unit and acceptance tests."""

import math
from types import SimpleNamespace

import numpy as np

from adakv.controller import HIDDEN, ControllerParams, init_params
from adakv.quant import BitWidth, dequantize, quantize
from adakv.saliency import SaliencyFeatures
from adakv.trainer import LossWeights, TrainingSample, loss_from_arrays

WEIGHT_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


def random_problem(rng, batch=8):
    """Random params, standardized features, labels and loss weights."""
    p = init_params(int(rng.integers(2**32)))
    p = p.with_weights(b1=rng.normal(0, 0.1, HIDDEN), b2=rng.normal(0, 0.1, HIDDEN), b3=rng.normal(0, 0.1, 4))
    S = rng.standard_normal((batch, 4))
    y = rng.integers(0, 4, batch)
    w = LossWeights(float(rng.uniform(0.1, 2)), float(rng.uniform(0.1, 2)), float(rng.uniform(0.1, 2)),
                    tuple(np.sort(rng.uniform(0, 1, 4)) + np.arange(4) * 1e-3),
                    tuple(rng.uniform(0, 1, 4)))
    return p, S, y, w


def oracle_loss(S, y, a, w):
    """Scalar training loss written out directly, independent of the trainer."""
    h1 = np.maximum(S @ a.W1.T + a.b1, 0.0)
    h2 = np.maximum(h1 @ a.W2.T + a.b2, 0.0)
    o = h2 @ a.W3.T + a.b3
    m = o.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(o - m).sum(axis=1))
    p = np.exp(o - lse[:, None])
    ce = np.mean(lse - o[np.arange(len(y)), y])
    lat = np.mean(p @ np.asarray(w.cost))
    qual = 1.0 - np.mean(p @ np.asarray(w.quality_scores))
    return w.alpha * ce + w.beta * lat + w.gamma * qual


def finite_difference_grads(params: ControllerParams, S, y, w, step=1e-5, loss_fn=None):
    """Central differences of the scalar loss, one parameter entry at a time."""
    arrays = {k: getattr(params, k).copy() for k in WEIGHT_NAMES}
    probe = SimpleNamespace(**arrays)
    if loss_fn is None:
        def loss():
            return loss_from_arrays(S, y, probe, w)[0]
    else:
        def loss():
            return loss_fn(S, y, probe, w)

    out = {}
    for name, a in arrays.items():
        g = np.empty_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss()
            flat[i] = orig - step
            down = loss()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        out[name] = g
    return out


def _loss_from_logits(o, y, w):
    """Oracle loss for logits with arbitrary leading batch axes (..., n, 4)."""
    m = o.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(o - m).sum(axis=-1))
    p = np.exp(o - lse[..., None])
    picked = np.take_along_axis(o, np.broadcast_to(y[:, None], o.shape[:-1] + (1,)), axis=-1)[..., 0]
    ce = np.mean(lse - picked, axis=-1)
    lat = np.mean(p @ np.asarray(w.cost), axis=-1)
    qual = 1.0 - np.mean(p @ np.asarray(w.quality_scores), axis=-1)
    return w.alpha * ce + w.beta * lat + w.gamma * qual


def vectorized_finite_differences(params: ControllerParams, S, y, w, step=1e-5):
    """Same central differences as :func:`finite_difference_grads`, all entries at once.

    A single-entry perturbation only moves one hidden or output unit, so each
    perturbed forward pass is the unperturbed one plus a broadcast correction.
    No derivative information is used.
    """
    W1, b1, W2, b2, W3, b3 = (getattr(params, k) for k in WEIGHT_NAMES)
    pre1 = S @ W1.T + b1
    h1 = np.maximum(pre1, 0.0)
    pre2 = h1 @ W2.T + b2
    h2 = np.maximum(pre2, 0.0)
    o = h2 @ W3.T + b3
    out = {}
    for sign in (1.0, -1.0):
        d = sign * step
        res = {}
        # output layer: logits[:, k] moves by d * h2[:, j] (or d for the bias)
        eye4 = np.eye(4)
        oW3 = o[None, None] + d * h2.T[None, :, :, None] * eye4[:, None, None, :]
        res["W3"] = _loss_from_logits(oW3, y, w)
        res["b3"] = _loss_from_logits(o[None] + d * eye4[:, None, :], y, w)
        # second layer: unit i of h2 changes, logits move along W3[:, i]
        dpre2 = d * h1.T[None, :, :]                      # (1, j, n) for W2[i, j]
        new_h2 = np.maximum(pre2.T[:, None, :] + dpre2, 0.0)  # (i, j, n)
        oW2 = o + (new_h2 - h2.T[:, None, :])[..., None] * W3.T[:, None, None, :]
        res["W2"] = _loss_from_logits(oW2, y, w)
        new_h2b = np.maximum(pre2.T + d, 0.0)              # (i, n)
        res["b2"] = _loss_from_logits(o + (new_h2b - h2.T)[..., None] * W3.T[:, None, :], y, w)
        # first layer: unit i of h1 changes, then the rest of the net is recomputed
        dpre1 = d * np.concatenate([S.T, np.ones((1, len(y)))])   # (j, n); last row is the bias
        new_h1 = np.maximum(pre1.T[:, None, :] + dpre1[None], 0.0)  # (i, j, n)
        delta1 = new_h1 - h1.T[:, None, :]
        pre2p = pre2[None, None] + delta1[..., None] * W2.T[:, None, None, :]  # (i, j, n, 128)
        op = np.maximum(pre2p, 0.0) @ W3.T + b3
        full = _loss_from_logits(op, y, w)
        res["W1"], res["b1"] = full[:, :-1], full[:, -1]
        for k, v in res.items():
            out[k] = out.get(k, 0.0) + sign * v
    return {k: out[k] / (2 * step) for k in WEIGHT_NAMES}


def near_relu_kink(params: ControllerParams, S, step=1e-5) -> bool:
    """True if a single-entry perturbation of size ``step`` could flip a ReLU.

    Central differences straddling a kink measure the average of two one-sided
    slopes rather than the derivative, so such points are unusable as checks.
    """
    pre1 = S @ params.W1.T + params.b1
    pre2 = np.maximum(pre1, 0.0) @ params.W2.T + params.b2
    # largest shift any single perturbation can cause in each layer's pre-activations
    reach1 = step * max(1.0, np.abs(S).max())
    reach2 = step * max(1.0, np.maximum(pre1, 0.0).max()) + np.abs(params.W2).max() * reach1
    return bool(np.abs(pre1).min() <= reach1 or np.abs(pre2).min() <= reach2)


def relative_error(analytic, numeric):
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def brute_force_label(keys, values, queries, position, tau, query_positions, per_token_budget=True):
    """Loop-level re-implementation of the distortion oracle."""
    L, n, h, d = keys.shape
    widths = [BitWidth.B2, BitWidth.B4, BitWidth.B8, BitWidth.B16]

    def outputs(K, V):
        res = []
        for li in range(L):
            for pi, qp in enumerate(query_positions):
                for hi in range(h):
                    visible = [t for t in range(n) if t <= qp]
                    s = [float(queries[li, pi, hi] @ K[li, t, hi]) / math.sqrt(d) for t in visible]
                    m = max(s)
                    e = [math.exp(v - m) for v in s]
                    z = sum(e)
                    res.append(sum((e[j] / z) * V[li, t, hi] for j, t in enumerate(visible)))
        return np.array(res)

    exact = outputs(keys, values)
    dist = []
    for b in widths:
        K, V = keys.copy(), values.copy()
        for li in range(L):
            for hi in range(h):
                K[li, position, hi] = dequantize(quantize(keys[li, position, hi], b))
                V[li, position, hi] = dequantize(quantize(values[li, position, hi], b))
        dist.append(np.linalg.norm(outputs(K, V) - exact) / np.linalg.norm(exact))
    dist = np.array(dist) * (n if per_token_budget else 1)
    for b, dv in zip(widths, dist):
        if dv <= tau:
            return b, dist
    return BitWidth.B16, dist


def cluster_dataset(rng, per_class=1000, sep=10.0):
    """Four Gaussian blobs (unit sigma) whose centres are ``sep`` apart."""
    centres = sep * np.array([[0, 0, 0, 0], [1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0]], dtype=float)
    out = []
    for k, c in enumerate(centres):
        X = c + rng.standard_normal((per_class, 4))
        out.extend(TrainingSample(SaliencyFeatures(*x), BitWidth.from_index(k), 0.1 * (k + 1), 1.0) for x in X)
    return out
