"""Backbone, channel self-modulation, deformable conv, pyramid aggregation."""

import numpy as np
import pytest

from conftest import gradcheck
from protoseg import tensor as T
from protoseg.pyramid import (CsmBlock, DeformableConv, PixelDecoder,
                              StubBackbone, global_avg_pool, upsample2x)
from protoseg.tensor import Tensor


def test_global_avg_pool_matches_mean():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 4, 5))
    got = global_avg_pool(Tensor(x)).data
    np.testing.assert_allclose(got[:, 0, 0], x.mean(axis=(1, 2)), rtol=1e-12)
    assert got.shape == (3, 1, 1)


def test_upsample2x_doubles_resolution():
    x = Tensor(np.random.default_rng(1).standard_normal((2, 3, 5)))
    assert upsample2x(x).shape == (2, 6, 10)


def test_backbone_stride_ladder():
    rng = np.random.default_rng(2)
    bb = StubBackbone(rng, (4, 8, 16, 32))
    feats = bb(Tensor(rng.standard_normal((3, 64, 64))))
    shapes = [f.shape for f in feats]
    assert shapes == [(4, 16, 16), (8, 8, 8), (16, 4, 4), (32, 2, 2)]


def test_backbone_rejects_unaligned_resolution():
    bb = StubBackbone(np.random.default_rng(3), (4, 8, 16, 32))
    with pytest.raises(ValueError):
        bb(Tensor(np.zeros((3, 60, 64))))


def test_csm_formula_matches_numpy_oracle():
    rng = np.random.default_rng(4)
    block = CsmBlock(rng, 5, 8, bottleneck=4, norm="none")
    x = rng.standard_normal((5, 6, 6))
    got = block(Tensor(x)).data

    def conv1x1(layer, v):
        return np.einsum("oi,ihw->ohw", layer.w.data[:, :, 0, 0], v) \
            + layer.b.data[:, None, None]

    f = conv1x1(block.proj, x)
    gap = f.mean(axis=(1, 2))[:, None, None]
    hidden = np.maximum(conv1x1(block.mlp_a, gap), 0.0)
    omega = conv1x1(block.mlp_b, hidden)
    want = f * (1.0 / (1.0 + np.exp(-omega))) + f
    np.testing.assert_allclose(got, want, rtol=1e-10)


def test_csm_zeroed_gate_scales_by_one_and_a_half():
    rng = np.random.default_rng(5)
    block = CsmBlock(rng, 4, 6, norm="none")
    block.mlp_b.w.data[:] = 0.0
    block.mlp_b.b.data[:] = 0.0  # omega = 0, sigmoid = 0.5
    x = Tensor(rng.standard_normal((4, 5, 5)))
    f = T.conv2d(x, block.proj.w, block.proj.b).data
    np.testing.assert_allclose(block(x).data, 1.5 * f, rtol=1e-12)


def test_csm_hidden_width_uses_bottleneck():
    block = CsmBlock(np.random.default_rng(6), 4, 16, bottleneck=4)
    assert block.mlp_a.w.shape[0] == 4
    tiny = CsmBlock(np.random.default_rng(6), 4, 2, bottleneck=4)
    assert tiny.mlp_a.w.shape[0] == 1  # floor at one hidden channel


def test_deformable_conv_zero_offsets_equals_conv():
    rng = np.random.default_rng(7)
    for _ in range(10):
        c_in = int(rng.integers(1, 4))
        c_out = int(rng.integers(1, 4))
        x = Tensor(rng.standard_normal((c_in, 7, 7)))
        layer = DeformableConv(rng, c_in, c_out)
        want = T.conv2d(x, layer.weight.w, layer.weight.b, stride=1, pad=1).data
        assert np.max(np.abs(layer(x).data - want)) < 1e-10


def test_deformable_conv_constant_offset_shifts_the_input():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 6, 6))
    layer = DeformableConv(rng, 2, 3)
    # constant (0, +1) offset for every tap reads one column to the right
    layer.offset.b.data[1::2] = 1.0
    got = layer(Tensor(x)).data
    shifted = np.zeros_like(x)
    shifted[:, :, :-1] = x[:, :, 1:]
    want = T.conv2d(Tensor(shifted), layer.weight.w, layer.weight.b,
                    stride=1, pad=1).data
    # at output column 0 the shifted-conv oracle reads zero padding where the
    # deformable taps read real pixels, so compare the interior columns
    np.testing.assert_allclose(got[:, :, 1:], want[:, :, 1:], atol=1e-10)


def test_deformable_conv_offset_predictor_is_zero_initialized():
    layer = DeformableConv(np.random.default_rng(9), 3, 3)
    assert np.all(layer.offset.w.data == 0) and np.all(layer.offset.b.data == 0)
    assert layer.offset.w.shape[0] == 18  # 2 offset channels per kernel tap


def test_deformable_conv_gradients():
    rng = np.random.default_rng(10)
    layer = DeformableConv(rng, 2, 2)
    layer.offset.b.data[:] = 0.123  # move sampling off the bilinear cell corners
    x = Tensor(rng.standard_normal((2, 5, 5)), requires_grad=True)
    params = [x, layer.weight.w, layer.weight.b, layer.offset.w, layer.offset.b]
    gradcheck(lambda: T.reduce_sum(T.square(layer(x))), params,
              np.random.default_rng(11), rtol=1e-4, max_coords=3)


def test_pixel_decoder_pyramid_shapes_and_width():
    rng = np.random.default_rng(12)
    widths = (4, 8, 16, 32)
    bb = StubBackbone(rng, widths)
    dec = PixelDecoder(rng, widths, c_px=6)
    pyramid = dec(bb(Tensor(rng.standard_normal((3, 64, 64)))))
    assert [p.shape for p in pyramid] == [(6, 16, 16), (6, 8, 8), (6, 4, 4), (6, 2, 2)]


def test_pixel_decoder_scene_vector_modulates_coarsest_scale():
    rng = np.random.default_rng(13)
    widths = (4, 8, 16, 32)
    dec = PixelDecoder(rng, widths, c_px=6)
    feats = [Tensor(rng.standard_normal((w, 16 // s, 16 // s)))
             for w, s in zip(widths, (1, 2, 4, 8))]
    base = dec(feats)
    # changing only the raw coarsest feature's mean moves every level
    feats2 = [Tensor(f.data.copy()) for f in feats]
    feats2[3].data += 3.0
    shifted = dec(feats2)
    for a, b in zip(base, shifted):
        assert np.max(np.abs(a.data - b.data)) > 1e-8


def test_finest_scale_skips_deformable_conv():
    rng = np.random.default_rng(14)
    widths = (4, 8, 16, 32)
    dec = PixelDecoder(rng, widths, c_px=6)
    feats = [Tensor(rng.standard_normal((w, 16 // s, 16 // s)))
             for w, s in zip(widths, (1, 2, 4, 8))]
    pyramid = dec(feats)
    want = dec.csm[0](feats[0]).data + upsample2x(pyramid[1]).data
    np.testing.assert_allclose(pyramid[0].data, want, rtol=1e-12)


def test_backbone_gradients_flow_to_stem():
    rng = np.random.default_rng(15)
    bb = StubBackbone(rng, (2, 3, 4, 5))
    x = Tensor(rng.standard_normal((3, 32, 32)))
    out = T.reduce_sum(T.square(bb(x)[3]))
    out.backward()
    assert bb.stem_a.w.grad is not None
    assert np.any(bb.stem_a.w.grad != 0)
