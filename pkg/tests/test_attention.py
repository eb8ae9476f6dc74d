"""Prototype selection, the interaction path, and the softmax baselines."""

import numpy as np
import pytest

from conftest import gradcheck
from protoseg import tensor as T
from protoseg.attention import (NORM_EPS, PemcaAttention, SoftmaxCrossAttention,
                                build_attention_mask, make_cross_attention,
                                prototype_cross_attention, select_prototypes)
from protoseg.config import ModelConfig
from protoseg.tensor import Tensor


def brute_force_selection(k, q, fg, heads):
    """Per-(head, query) linear scan restricted to foreground pixels."""
    hw, d = k.shape
    n = q.shape[0]
    dh = d // heads
    g = np.empty((heads, n), dtype=np.int64)
    for h in range(heads):
        kh = k[:, h * dh:(h + 1) * dh]
        qh = q[:, h * dh:(h + 1) * dh]
        for qi in range(n):
            scores = kh @ qh[qi]
            if fg is not None and fg[:, qi].any():
                cand = np.flatnonzero(fg[:, qi])
            else:
                cand = np.arange(hw)
            g[h, qi] = cand[np.argmax(scores[cand])]
    return g


def random_instance(rng, max_hw=256, max_n=8):
    heads = int(rng.choice([1, 2, 4, 8]))
    dh = int(rng.integers(1, 5))
    hw = int(rng.integers(heads * dh + 1, max_hw))
    n = int(rng.integers(1, max_n + 1))
    k = rng.standard_normal((hw, heads * dh))
    q = rng.standard_normal((n, heads * dh))
    fg = rng.random((hw, n)) < rng.uniform(0.05, 0.6)
    for qi in range(n):
        if not fg[:, qi].any():
            fg[rng.integers(0, hw), qi] = True
    return k, q, fg, heads


def test_selection_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(60):
        k, q, fg, heads = random_instance(rng)
        mask = np.where(fg, 0.0, -np.inf)
        g, _ = select_prototypes(Tensor(k), Tensor(q), mask, heads)
        np.testing.assert_array_equal(g, brute_force_selection(k, q, fg, heads))


def test_selection_without_mask_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(20):
        k, q, _, heads = random_instance(rng)
        g, _ = select_prototypes(Tensor(k), Tensor(q), None, heads)
        np.testing.assert_array_equal(g, brute_force_selection(k, q, None, heads))


def test_selection_ties_break_to_lowest_index_across_chunks():
    # two identical K rows on opposite sides of the 4096-wide tiling seam
    hw, d = 5000, 4
    k = np.zeros((hw, d))
    winner = np.array([1.0, 2.0, 3.0, 4.0])
    k[100] = winner
    k[4500] = winner
    q = winner[None, :].copy()
    g, _ = select_prototypes(Tensor(k), Tensor(q), None, 1)
    assert g[0, 0] == 100


def test_selection_all_masked_query_falls_back_to_unmasked_argmax():
    rng = np.random.default_rng(2)
    k = rng.standard_normal((40, 6))
    q = rng.standard_normal((3, 6))
    fg = rng.random((40, 3)) < 0.3
    fg[:, 1] = False  # query 1 has no feasible pixel
    fg[5, 0] = True
    fg[7, 2] = True
    mask = np.where(fg, 0.0, -np.inf)
    g, _ = select_prototypes(Tensor(k), Tensor(q), mask, 2)
    unmasked = brute_force_selection(k, q, None, 2)
    masked = brute_force_selection(k, q, fg, 2)
    np.testing.assert_array_equal(g[:, 1], unmasked[:, 1])
    np.testing.assert_array_equal(g[:, [0, 2]], masked[:, [0, 2]])


def test_selected_prototypes_gather_per_head_channel_groups():
    rng = np.random.default_rng(3)
    k = rng.standard_normal((30, 8))
    q = rng.standard_normal((4, 8))
    g, k_p = select_prototypes(Tensor(k), Tensor(q), None, 2)
    for qi in range(4):
        np.testing.assert_array_equal(k_p.data[qi, :4], k[g[0, qi], :4])
        np.testing.assert_array_equal(k_p.data[qi, 4:], k[g[1, qi], 4:])


def test_selection_is_scale_invariant_in_queries():
    rng = np.random.default_rng(4)
    k = rng.standard_normal((50, 8))
    q = rng.standard_normal((5, 8))
    g1, _ = select_prototypes(Tensor(k), Tensor(q), None, 4)
    g2, _ = select_prototypes(Tensor(k), Tensor(q * 7.5), None, 4)
    np.testing.assert_array_equal(g1, g2)


def test_build_attention_mask_threshold_and_layout():
    logits = np.array([[[1.0, -2.0], [0.5, -0.1]],
                       [[-1.0, -1.0], [-1.0, 3.0]]])  # [N=2, 2, 2]
    mask = build_attention_mask(logits, (2, 2))  # same resolution, no resize
    assert mask.shape == (4, 2)
    np.testing.assert_array_equal(mask[:, 0], [0.0, -np.inf, 0.0, -np.inf])
    np.testing.assert_array_equal(mask[:, 1], [-np.inf, -np.inf, -np.inf, 0.0])


def test_build_attention_mask_resizes_before_binarizing():
    # a constant-positive map stays foreground everywhere at any resolution
    logits = np.full((1, 4, 4), 2.0)
    mask = build_attention_mask(logits, (8, 8))
    np.testing.assert_array_equal(mask, 0.0)
    with pytest.raises(ValueError):
        build_attention_mask(np.zeros((1, 16)), (4, 4))
    with pytest.raises(ValueError):
        build_attention_mask(logits, (0, 4))


def test_interaction_formula_matches_numpy_oracle():
    rng = np.random.default_rng(5)
    n, d, c = 4, 6, 5
    q = rng.standard_normal((n, d))
    k_p = rng.standard_normal((n, d))
    q_in = rng.standard_normal((n, c))
    w_a = rng.standard_normal((d, d))
    alpha = rng.standard_normal(d)
    w_out = rng.standard_normal((d, c))
    got = prototype_cross_attention(Tensor(q), Tensor(k_p), Tensor(q_in),
                                    Tensor(w_a), Tensor(alpha), Tensor(w_out)).data
    a = (q * k_p) @ w_a
    norm = np.sqrt((a * a).sum(axis=1, keepdims=True) + NORM_EPS)
    b = alpha * (a / norm) + k_p
    np.testing.assert_allclose(got, b @ w_out + q_in, rtol=1e-12)


def test_zero_output_projection_is_exact_identity():
    rng = np.random.default_rng(6)
    layer = PemcaAttention(rng, 12, 12, 3, zero_init_out=True)
    q_in = Tensor(rng.standard_normal((7, 12)))
    feat = Tensor(rng.standard_normal((50, 12)))
    mask = np.where(rng.random((50, 7)) < 0.5, 0.0, -np.inf)
    out, _ = layer(q_in, q_in, feat, mask)
    assert np.array_equal(out.data, q_in.data)


def test_masked_pixels_are_never_selected():
    rng = np.random.default_rng(7)
    for _ in range(300):
        k, q, fg, heads = random_instance(rng, max_hw=96, max_n=4)
        mask = np.where(fg, 0.0, -np.inf)
        g, _ = select_prototypes(Tensor(k), Tensor(q), mask, heads)
        for h in range(heads):
            assert fg[g[h], np.arange(q.shape[0])].all()


def test_pemca_gradients_with_frozen_selection():
    rng = np.random.default_rng(8)
    layer = PemcaAttention(rng, 8, 8, 2)
    q_in = Tensor(rng.standard_normal((3, 8)), requires_grad=True)
    feat = Tensor(rng.standard_normal((20, 8)), requires_grad=True)
    frozen_g, _ = select_prototypes(layer.wk(feat), layer.wq(q_in), None, 2)
    params = [feat, q_in, layer.wq.w, layer.wk.w, layer.w_a, layer.alpha, layer.w_out]

    def build():
        out, _ = layer(q_in, q_in, feat, None, frozen_g=frozen_g)
        return T.reduce_sum(T.square(out))

    gradcheck(build, params, np.random.default_rng(9), rtol=1e-4, max_coords=3)


def test_softmax_baseline_matches_naive_oracle():
    rng = np.random.default_rng(10)
    c, d, heads, n, hw = 6, 6, 2, 3, 15
    layer = SoftmaxCrossAttention(rng, c, d, heads)
    q_in = rng.standard_normal((n, c))
    feat = rng.standard_normal((hw, c))
    fg = rng.random((hw, n)) < 0.5
    for qi in range(n):
        if not fg[:, qi].any():
            fg[0, qi] = True
    mask = np.where(fg, 0.0, -np.inf)
    out, _ = layer(Tensor(q_in), Tensor(q_in), Tensor(feat), mask)

    q = q_in @ layer.wq.w.data
    k = feat @ layer.wk.w.data
    v = feat @ layer.wv.w.data
    dh = d // heads
    merged = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for qi in range(n):
            scores = k[:, sl] @ q[qi, sl] / np.sqrt(dh)
            scores[~fg[:, qi]] = -np.inf
            e = np.exp(scores - scores.max())
            attn = e / e.sum()
            merged[qi, sl] = attn @ v[:, sl]
    want = merged @ layer.wo.data + q_in
    np.testing.assert_allclose(out.data, want, rtol=1e-9)


def test_softmax_baseline_all_masked_query_uses_unmasked_weights():
    rng = np.random.default_rng(11)
    layer = SoftmaxCrossAttention(rng, 4, 4, 1)
    q_in = Tensor(rng.standard_normal((2, 4)))
    feat = Tensor(rng.standard_normal((10, 4)))
    mask = np.zeros((10, 2))
    mask[:, 1] = -np.inf
    masked_out, _ = layer(q_in, q_in, feat, mask)
    plain_out, _ = layer(q_in, q_in, feat, None)
    np.testing.assert_allclose(masked_out.data[1], plain_out.data[1], rtol=1e-12)


def test_no_prototype_variant_aggregates_foreground_tokens():
    rng = np.random.default_rng(12)
    cfg = ModelConfig(C=8, D=8, heads=2, variant="pemca_no_proto",
                      num_queries=3, zero_init_out=False)
    layer = make_cross_attention(np.random.default_rng(0), cfg)
    q_in = rng.standard_normal((3, 8))
    feat = rng.standard_normal((12, 8))
    fg = rng.random((12, 3)) < 0.5
    fg[:, 2] = False  # empty query falls back to summing everything
    fg[0, 0] = True
    fg[1, 1] = True
    mask = np.where(fg, 0.0, -np.inf)
    out, g = layer(Tensor(q_in), Tensor(q_in), Tensor(feat), mask)
    assert g is None
    k = feat @ layer.wk.w.data
    q = q_in @ layer.wq.w.data
    agg = fg.astype(float)
    agg[:, 2] = 1.0
    k_p = agg.T @ k
    a = (q * k_p) @ layer.w_a.data
    norm = np.sqrt((a * a).sum(axis=1, keepdims=True) + NORM_EPS)
    b = layer.alpha.data * (a / norm) + k_p
    np.testing.assert_allclose(out.data, b @ layer.w_out.data + q_in, rtol=1e-9)


def test_variant_factory_dispatch():
    rng = np.random.default_rng(13)
    for variant, cls, masking in [("pemca", PemcaAttention, True),
                                  ("pemca_no_mask", PemcaAttention, False),
                                  ("pemca_no_proto", PemcaAttention, True),
                                  ("masked_ca", SoftmaxCrossAttention, True),
                                  ("plain_ca", SoftmaxCrossAttention, False)]:
        cfg = ModelConfig(C=8, D=8, heads=2, variant=variant)
        layer = make_cross_attention(rng, cfg)
        assert isinstance(layer, cls)
        assert layer.masking == masking
    with pytest.raises(ValueError):
        ModelConfig(variant="bogus")
