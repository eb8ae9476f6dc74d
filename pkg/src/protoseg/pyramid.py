"""Multi-scale pixel decoder: context-based self-modulation, deformable
convolution, and cross-scale aggregation into a uniform-width pyramid at
strides 4/8/16/32."""

import numpy as np

from . import tensor as T
from .module import ChannelNorm, Conv2dLayer, Module
from .tensor import Tensor


def global_avg_pool(x):
    """[C,H,W] -> [C,1,1]."""
    c = x.shape[0]
    return T.reshape(T.reduce_mean(T.reshape(x, c, -1), axis=1), c, 1, 1)


def upsample2x(x):
    """2x bilinear upsampling of a [C,H,W] map."""
    _, h, w = x.shape
    return T.resize_bilinear(x, (2 * h, 2 * w))


class StubBackbone(Module):
    """Four strided conv stages standing in for a pretrained backbone."""

    def __init__(self, rng, widths, dtype=np.float64):
        b1, b2, b3, b4 = widths
        self.stem_a = Conv2dLayer(rng, 3, b1, 3, stride=2, pad=1, dtype=dtype)
        self.stem_b = Conv2dLayer(rng, b1, b1, 3, stride=2, pad=1, dtype=dtype)
        self.stage2 = Conv2dLayer(rng, b1, b2, 3, stride=2, pad=1, dtype=dtype)
        self.stage3 = Conv2dLayer(rng, b2, b3, 3, stride=2, pad=1, dtype=dtype)
        self.stage4 = Conv2dLayer(rng, b3, b4, 3, stride=2, pad=1, dtype=dtype)

    def __call__(self, image):
        _, h, w = image.shape
        if h % 32 or w % 32:
            raise ValueError(f"image resolution {h}x{w} must be divisible by 32")
        f1 = T.relu(self.stem_b(T.relu(self.stem_a(image))))  # stride 4
        f2 = T.relu(self.stage2(f1))                          # stride 8
        f3 = T.relu(self.stage3(f2))                          # stride 16
        f4 = T.relu(self.stage4(f3))                          # stride 32
        return [f1, f2, f3, f4]


class CsmBlock(Module):
    """Project to C_px, then reweight channels by a sigmoid-gated scene vector.

    out = proj(x) * sigmoid(MLP(GAP(proj(x)))) + proj(x)
    """

    def __init__(self, rng, c_in, c_px, bottleneck=4, norm="channel", dtype=np.float64):
        hidden = max(c_px // bottleneck, 1)
        self.proj = Conv2dLayer(rng, c_in, c_px, 1, dtype=dtype)
        self.norm = ChannelNorm(c_px, dtype=dtype) if norm == "channel" else None
        self.mlp_a = Conv2dLayer(rng, c_px, hidden, 1, dtype=dtype)
        self.mlp_b = Conv2dLayer(rng, hidden, c_px, 1, dtype=dtype)

    def __call__(self, x):
        f = self.proj(x)
        if self.norm is not None:
            f = self.norm(f)
        omega = self.mlp_b(T.relu(self.mlp_a(global_avg_pool(f))))  # [C_px,1,1]
        return f * T.sigmoid(omega) + f


class DeformableConv(Module):
    """3x3 deformable convolution (offsets only, no modulation), stride 1, pad 1.

    The offset predictor is a zero-initialized 3x3 conv emitting 2 channels
    per kernel tap, so the layer starts as a standard convolution.
    """

    def __init__(self, rng, c_in, c_out, dtype=np.float64):
        self.weight = Conv2dLayer(rng, c_in, c_out, 3, pad=1, dtype=dtype)
        self.offset = Conv2dLayer(rng, c_in, 18, 3, pad=1, zero=True, dtype=dtype)
        self._base = np.array([(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1)],
                              dtype=np.float64)

    def __call__(self, x):
        c_in, h, w = x.shape
        c_out = self.weight.w.shape[0]
        offsets = self.offset(x)                        # [18, H, W]
        off = T.reshape(offsets, 9, 2, h, w)
        grid_r, grid_c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        grid = np.stack([grid_r.ravel(), grid_c.ravel()], axis=1).astype(np.float64)
        acc = None
        for t in range(9):
            off_t = T.reshape(_tap(off, t), 2, h * w)   # [2, HW]
            pts = Tensor(grid + self._base[t], dtype=x.dtype) + T.transpose(off_t, (1, 0))
            sampled = T.bilinear_sample(x, pts)         # [C_in, HW]
            w_t = _tap_weight(self.weight.w, t)         # [C_out, C_in]
            term = T.matmul(w_t, sampled)               # [C_out, HW]
            acc = term if acc is None else acc + term
        acc = acc + T.reshape(self.weight.b, c_out, 1)
        return T.reshape(acc, c_out, h, w)


def _tap(off, t):
    """Select tap t from offsets reshaped [9,2,H,W] with gradient flow."""
    nine, two, h, w = off.shape
    flat = T.reshape(off, nine, two * h * w)
    return T.reshape(T.gather_rows(flat, np.array([t])), two, h, w)


def _tap_weight(w, t):
    """Select kernel tap t (row-major) from weights [C_out,C_in,3,3]."""
    c_out, c_in = w.shape[0], w.shape[1]
    flat = T.reshape(T.transpose(T.reshape(w, c_out, c_in, 9), (2, 0, 1)), 9, c_out * c_in)
    return T.reshape(T.gather_rows(flat, np.array([t])), c_out, c_in)


class PixelDecoder(Module):
    """Fuse the four backbone scales into F-hat_1..F-hat_4 (strides 4..32)."""

    def __init__(self, rng, widths, c_px, bottleneck=4, norm="channel", dtype=np.float64):
        self.csm = [CsmBlock(rng, b, c_px, bottleneck, norm=norm, dtype=dtype) for b in widths]
        self.scene_proj = Conv2dLayer(rng, widths[3], c_px, 1, dtype=dtype)
        self.defconv4 = DeformableConv(rng, c_px, c_px, dtype=dtype)
        self.defconv3 = DeformableConv(rng, c_px, c_px, dtype=dtype)
        self.defconv2 = DeformableConv(rng, c_px, c_px, dtype=dtype)

    def __call__(self, feats):
        c1, c2, c3, c4 = (self.csm[i](f) for i, f in enumerate(feats))
        # the scene vector pools the raw backbone feature, not the contextualized one
        scene = self.scene_proj(global_avg_pool(feats[3]))    # [C_px,1,1]
        p4 = self.defconv4(c4 + scene)
        p3 = self.defconv3(c3 + upsample2x(p4))
        p2 = self.defconv2(c2 + upsample2x(p3))
        p1 = c1 + upsample2x(p2)                              # no deformable conv at stride 4
        return [p1, p2, p3, p4]
