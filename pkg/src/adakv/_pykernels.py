"""Pure-numpy versions of the compiled kernels in ``_ckernels.pyx``."""

import numpy as np


def quantize_rows(x, bits):
    x = np.ascontiguousarray(x, dtype=np.float64)
    levels = float((1 << bits) - 1)
    lo = x.min(axis=1)
    hi = x.max(axis=1)
    span = hi - lo
    flat = span == 0.0
    scale = np.where(flat, 0.0, span / levels)
    safe = np.where(flat, 1.0, scale)
    codes = np.floor((x - lo[:, None]) / safe[:, None] + 0.5)
    np.clip(codes, 0.0, levels, out=codes)
    codes[flat] = 0.0
    return codes, scale, lo.copy()


def hetero_attention(q, k_pay, k_scale, k_zero, v_pay, v_scale, v_zero, n,
                     self_k=None, self_v=None):
    h, d = q.shape
    keys = k_zero[:n, :, None] + k_scale[:n, :, None] * k_pay[:n]
    vals = v_zero[:n, :, None] + v_scale[:n, :, None] * v_pay[:n]
    if self_k is not None:
        keys = np.concatenate([keys, np.asarray(self_k, dtype=np.float64)[None]])
        vals = np.concatenate([vals, np.asarray(self_v, dtype=np.float64)[None]])
    if keys.shape[0] == 0:
        raise ValueError("attention over an empty cache")
    scores = np.einsum("hd,thd->ht", q, keys) / np.sqrt(d)
    scores -= scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    out = np.einsum("ht,thd->hd", w, vals)
    return out, (w * w).sum(axis=1)
