import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adakv.quant import InvalidInputError
from adakv.saliency import (
    SaliencyFeatures,
    TokenCounter,
    attention_variance,
    build_features,
    causal_variance,
    confidence,
    entropy,
    rarity,
)


def test_entropy_examples():
    assert entropy(np.zeros(4)) == pytest.approx(math.log(4), abs=1e-12)
    assert entropy([1000.0, 0, 0, 0]) == pytest.approx(0.0, abs=1e-6)
    assert entropy([0.0, 0.0, -1e9, -1e9]) == pytest.approx(math.log(2), abs=1e-12)


@pytest.mark.parametrize("bad", [[1.0], [np.nan, 0.0], [np.inf, 1.0]])
def test_entropy_rejects(bad):
    with pytest.raises(InvalidInputError):
        entropy(bad)


logit_vectors = arrays(np.float64, st.integers(2, 50), elements=st.floats(-50, 50))


@settings(max_examples=200, deadline=None)
@given(logit_vectors, st.floats(-1e3, 1e3))
def test_entropy_bounds_and_shift(z, c):
    h = entropy(z)
    assert -1e-12 <= h <= math.log(len(z)) + 1e-12
    assert entropy(z + c) == pytest.approx(h, abs=1e-9)


def test_confidence_entropy_consistency():
    # p = (1 - eps, eps/(V-1), ...) with eps = 1e-6
    eps, V = 1e-6, 8
    z = np.log(np.r_[1 - eps, np.full(V - 1, eps / (V - 1))])
    assert confidence(z) == pytest.approx(1 - eps)
    assert entropy(z) < 1e-4


def test_rarity_examples():
    c = TokenCounter()
    assert rarity(7, c) == 0.0
    c = TokenCounter()
    for i in range(10):
        c.counts[i] = 9 if i == 0 else 10
    c.total = 99
    assert rarity(0, c) == pytest.approx(2.397895272798370544, rel=1e-14)
    c = TokenCounter()
    for _ in range(99):
        c.update(3)
    assert rarity(3, c) == pytest.approx(0.009950330853168082848, rel=1e-12)


def test_rarity_strictly_decreases_in_count():
    vals = []
    for count in range(6):
        c = TokenCounter()
        c.counts.update({0: count, 1: 10 - count})
        c.total = 10
        vals.append(rarity(0, c))
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_counter_invariants():
    c = TokenCounter()
    for t in [1, 2, 2, 3, 3, 3]:
        c.update(t)
    assert c.total == sum(c.counts.values()) == 6
    assert c.distinct == 3


def test_attention_variance_examples():
    assert attention_variance(np.full((1, 4, 4), 0.25)) == 0.0
    assert attention_variance(np.eye(2)[None]) == pytest.approx(0.25)
    assert attention_variance(np.stack([np.full((2, 2), 0.5), np.eye(2)])) == pytest.approx(0.125)
    with pytest.raises(InvalidInputError):
        attention_variance(np.zeros((0, 0, 0)))


def _random_causal(rng, h, l):
    a = np.zeros((h, l, l))
    for i in range(h):
        for r in range(l):
            w = rng.random(r + 1)
            a[i, r, : r + 1] = w / w.sum()
    return a


def test_causal_variance_matches_direct(rng):
    for l in (1, 2, 5, 17):
        a = _random_causal(rng, 3, l)
        sumsq = (a**2).sum(axis=(1, 2))
        assert causal_variance(sumsq, l) == pytest.approx(attention_variance(a), rel=1e-12, abs=1e-15)


def test_attention_variance_zero_iff_constant(rng):
    assert attention_variance(np.full((2, 3, 3), 0.7)) == 0.0
    assert attention_variance(_random_causal(rng, 2, 4)) > 0.0


def test_build_features_uniform_case():
    f = build_features(np.zeros(4), 5, TokenCounter(), np.full((1, 4, 4), 0.25))
    np.testing.assert_allclose(f.as_array(), [math.log(4), 0.0, 0.0, 0.25], atol=1e-12)


def test_build_features_standardization():
    raw = build_features(np.array([2.0, 0.1, -1.0]), 1, TokenCounter(), np.eye(3)[None])
    z = build_features(np.array([2.0, 0.1, -1.0]), 1, TokenCounter(), np.eye(3)[None],
                       stats=(raw.as_array(), np.ones(4)))
    np.testing.assert_array_equal(z, np.zeros(4))


def test_standardize_elementwise():
    from adakv.saliency import standardize

    out = standardize([2, 1, 0.5, 0.9], (np.array([1, 1, 0, 0.5]), np.array([1, 2, 1, 2])))
    np.testing.assert_allclose(out, [1, 0, 0.5, 0.2], atol=1e-15)


def test_feature_vector_round_trip():
    f = SaliencyFeatures(1.0, 2.0, 0.5, 0.25)
    assert SaliencyFeatures.from_array(f.as_array()) == f
