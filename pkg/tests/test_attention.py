"""Attention layers: frozen hand-derived values, invariants, and a
straight-line scripted re-implementation oracle for the residual block."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from novattn.attention import (
    AttentionBlock,
    LAYER_NORM_EPS,
    dot_attention_weights,
    layer_normalize,
    soft_knn,
    soft_knn_weights,
    transformer_block,
)
from novattn.autodiff import ParameterStore
from novattn.gradcheck import gradient_check
from novattn.selftest import (
    dot_attention_case,
    layer_norm_case,
    soft_knn_case,
    transformer_block_case,
)

# ---------------------------------------------------------------------------
# dot-product attention
# ---------------------------------------------------------------------------


def test_orthogonal_keys_give_uniform_weights():
    keys = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    w = dot_attention_weights(keys[:2], np.array([0.0, 0.0, 1.0]))
    assert np.allclose(w, [0.5, 0.5], atol=1e-15)


def test_two_key_weights_match_direct_evaluation():
    # exp(1)/(exp(1)+exp(0)) and exp(0)/(exp(1)+exp(0)), evaluated by hand
    w = dot_attention_weights(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1.0, 0.0]))
    assert np.allclose(w, [0.7310585786300049, 0.2689414213699951], atol=1e-12)


def test_single_key_weight_is_one():
    w = dot_attention_weights(np.array([[0.3, -0.7]]), np.array([5.0, 2.0]))
    assert w.shape == (1,) and w[0] == 1.0


def test_empty_key_set_fails():
    with pytest.raises(Exception):
        dot_attention_weights(np.zeros((0, 3)), np.zeros(3))


def test_duplicate_keys_share_weight_and_preserve_ratios():
    rng = np.random.default_rng(3)
    keys = rng.standard_normal((5, 4))
    q = rng.standard_normal(4)
    w = dot_attention_weights(keys, q)
    w_dup = dot_attention_weights(np.vstack([keys, keys[2]]), q)
    # identical keys receive identical weight: identity plays no role
    assert abs(w_dup[2] - w_dup[5]) < 1e-12
    # all other weights keep their relative proportions
    ratios = w_dup[:5] / w
    assert np.abs(ratios - ratios[0]).max() < 1e-12


# ---------------------------------------------------------------------------
# soft-kNN
# ---------------------------------------------------------------------------


def test_soft_knn_hard_limit_recovers_nearest_value():
    keys = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]])
    values = np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]])
    out = soft_knn(keys, values, np.array([0.0, 0.0]), alpha=20.0)
    assert np.abs(out - values[0]).max() < 1e-8


def test_soft_knn_equidistant_keys_average_values():
    keys = np.array([[1.0, 0.0], [-1.0, 0.0]])
    values = np.array([[2.0], [6.0]])
    out = soft_knn(keys, values, np.array([0.0, 0.0]), alpha=7.0)
    assert np.allclose(out, [4.0], atol=1e-12)


def test_soft_knn_weights_match_direct_evaluation():
    # distances 0 and 1 at alpha=20: [1/(1+e^-20), e^-20/(1+e^-20)]
    keys = np.array([[0.0, 0.0], [1.0, 0.0]])
    w = soft_knn_weights(keys, np.array([0.0, 0.0]), alpha=20.0)
    expected_minor = 2.0611536181902037e-09
    assert abs(w[1] - expected_minor) < 1e-18
    assert abs(w[0] - (1.0 - expected_minor)) < 1e-12


def test_soft_knn_rejects_bad_inputs():
    keys = np.array([[0.0, 0.0]])
    values = np.array([[1.0]])
    with pytest.raises(ValueError):
        soft_knn(np.zeros((0, 2)), np.zeros((0, 1)), np.zeros(2), alpha=1.0)
    with pytest.raises(ValueError):
        soft_knn(keys, values, np.zeros(2), alpha=0.0)
    with pytest.raises(ValueError):
        soft_knn(keys, values, np.zeros(2), alpha=-3.0)


def test_soft_knn_permutation_invariant():
    rng = np.random.default_rng(11)
    keys = rng.standard_normal((7, 3))
    values = rng.standard_normal((7, 4))
    q = rng.standard_normal(3)
    base = soft_knn(keys, values, q, alpha=5.0)
    for _ in range(10):
        perm = rng.permutation(7)
        out = soft_knn(keys[perm], values[perm], q, alpha=5.0)
        assert np.abs(out - base).max() < 1e-12


def test_weights_nonnegative_and_sum_to_one():
    rng = np.random.default_rng(5)
    for _ in range(300):
        n = int(rng.integers(1, 10))
        keys = rng.standard_normal((n, 4)) * rng.uniform(0.1, 20)
        q = rng.standard_normal(4)
        for w in (soft_knn_weights(keys, q, alpha=20.0), dot_attention_weights(keys, q)):
            assert (w >= 0).all()
            assert abs(w.sum() - 1.0) < 1e-12


def test_sharp_alpha_matches_exact_nearest_neighbour():
    rng = np.random.default_rng(6)
    checked = 0
    while checked < 100:
        keys = rng.standard_normal((8, 5))
        q = rng.standard_normal(5)
        d = np.sqrt(((keys - q) ** 2).sum(axis=1))
        gaps = np.diff(np.sort(d))
        if gaps.min() < 1e-3:  # ties excluded by construction
            continue
        w = soft_knn_weights(keys, q, alpha=1e4)
        assert int(np.argmax(w)) == int(np.argmin(d))
        checked += 1


# ---------------------------------------------------------------------------
# layer normalization
# ---------------------------------------------------------------------------


def test_layer_normalize_hand_computed_row():
    # mean 2, population std sqrt(2/3): (1,2,3) -> -+sqrt(3/2)
    out = layer_normalize([1.0, 2.0, 3.0])
    assert np.allclose(out, [[-1.224744871391589, 0.0, 1.224744871391589]], atol=1e-4)


def test_layer_normalize_idempotent_on_normalized_row():
    row = np.array([[-1.224744871391589, 0.0, 1.224744871391589]])
    out = layer_normalize(row)
    # the eps under the root bounds the deviation by eps/2 * max|x|
    assert np.abs(out - row).max() < 1e-8


def test_layer_normalize_constant_row_maps_to_zero():
    assert np.array_equal(layer_normalize([5.0, 5.0]), [[0.0, 0.0]])


@given(
    st.lists(st.floats(min_value=-100, max_value=100), min_size=2, max_size=12).filter(
        lambda xs: max(xs) - min(xs) > 1e-3
    )
)
@settings(max_examples=60, deadline=None)
def test_layer_normalize_row_statistics(xs):
    out = layer_normalize(np.array(xs))
    assert abs(out.mean()) < 1e-9
    assert abs(out.std() - 1.0) < 1e-3  # eps under the root shifts std slightly


# ---------------------------------------------------------------------------
# transformer block
# ---------------------------------------------------------------------------


def _random_block(rng, width=16, mode="residual"):
    store = ParameterStore()
    block = AttentionBlock("blk", width, embed_dim=8, mode=mode)
    block.register(store, rng)
    return block, store


def test_single_memory_row_makes_output_query_independent():
    rng = np.random.default_rng(9)
    block, store = _random_block(rng, mode="replace")
    memory = rng.standard_normal((1, 16))
    z_a = rng.standard_normal((3, 16))
    z_b = rng.standard_normal((3, 16))
    out_a = transformer_block(block, store, z_a, memory)
    out_b = transformer_block(block, store, z_b, memory)
    # weights are forced to [1], so in replace mode the query rows cannot
    # influence anything
    assert np.abs(out_a - out_b).max() < 1e-12


def test_zero_weights_block_reduces_to_row_normalization():
    rng = np.random.default_rng(10)
    block, store = _random_block(rng, mode="residual")
    for name in store.names():
        store.entries[name].value[:] = 0.0
    z_in = rng.standard_normal((4, 16))
    memory = rng.standard_normal((3, 16))
    out = transformer_block(block, store, z_in, memory)
    assert np.abs(out - layer_normalize(z_in)).max() < 1e-7


def _scripted_block_oracle(store, z_in, memory, mode):
    """Independent straight-line evaluation of the block equations."""

    def normalize(x):
        mu = x.mean(axis=1, keepdims=True)
        sd = np.sqrt(x.var(axis=1, keepdims=True) + LAYER_NORM_EPS)
        return (x - mu) / sd

    kq = store["blk.kq.w"]
    keys = memory @ kq
    queries = z_in @ kq
    logits = queries @ keys.T
    e = np.exp(logits)
    w = e / e.sum(axis=1, keepdims=True)
    pooled = w @ (memory @ store["blk.val.w"])
    attn = pooled @ store["blk.up.w"]
    z_star = normalize(z_in + attn) if mode == "residual" else normalize(attn)
    hidden = np.maximum(z_star @ store["blk.ff1.w"] + store["blk.ff1.b"], 0.0)
    ff = hidden @ store["blk.ff2.w"] + store["blk.ff2.b"]
    return normalize(z_star + ff)


@pytest.mark.parametrize("mode", ["residual", "replace"])
def test_block_matches_scripted_oracle(mode):
    rng = np.random.default_rng(12)
    block, store = _random_block(rng, width=16, mode=mode)
    z_in = rng.standard_normal((4, 16))
    memory = rng.standard_normal((6, 16))
    out = transformer_block(block, store, z_in, memory)
    expected = _scripted_block_oracle(store, z_in, memory, mode)
    assert np.abs(out - expected).max() < 1e-10


def test_block_width_mismatch_fails():
    rng = np.random.default_rng(13)
    block, store = _random_block(rng, width=16)
    with pytest.raises(ValueError):
        transformer_block(block, store, rng.standard_normal((2, 8)), rng.standard_normal((3, 16)))


def test_block_empty_memory_fails():
    rng = np.random.default_rng(14)
    block, store = _random_block(rng, width=16)
    with pytest.raises(ValueError):
        transformer_block(block, store, rng.standard_normal((2, 16)), np.zeros((0, 16)))


# ---------------------------------------------------------------------------
# gradients through every layer
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "case,tol",
    [
        (soft_knn_case, 1e-4),
        (dot_attention_case, 1e-4),
        (layer_norm_case, 1e-4),
        (transformer_block_case, 1e-4),
    ],
)
def test_layer_gradient_checks(case, tol):
    build, store = case()
    report = gradient_check(build, store, tolerance=tol)
    assert report.passed, report.summary()
