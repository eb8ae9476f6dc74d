"""Transformer decoder stack over the feature pyramid, with mask/class heads
and deep supervision, plus the semantic/panoptic readouts."""

import dataclasses

import numpy as np

from . import tensor as T
from .attention import SelfAttention, build_attention_mask, make_cross_attention
from .module import LayerNorm, Linear, Module, uniform_init
from .pyramid import PixelDecoder, StubBackbone
from .tensor import Tensor


@dataclasses.dataclass
class MaskPrediction:
    """Per-query mask logits at stride 4 plus class logits over K+1 classes."""
    mask_logits: Tensor    # [N, H1, W1]
    class_logits: Tensor   # [N, K+1]


@dataclasses.dataclass
class DecisionLog:
    """Discrete choices recorded during a forward pass (attention masks and
    prototype indices), replayable to hold them fixed for gradient checks."""
    masks: list = dataclasses.field(default_factory=list)
    selections: list = dataclasses.field(default_factory=list)


class FeedForward(Module):
    def __init__(self, rng, c, expansion, dtype=np.float64):
        self.up = Linear(rng, c, c * expansion, dtype=dtype)
        self.down = Linear(rng, c * expansion, c, dtype=dtype)

    def __call__(self, x):
        return self.down(T.relu(self.up(x)))


class DecoderBlock(Module):
    """Pre-norm block: cross-attention, self-attention, FFN."""

    def __init__(self, rng, cfg, dtype=np.float64):
        self.cross = make_cross_attention(rng, cfg, dtype=dtype)
        self.self_attn = SelfAttention(rng, cfg.C, cfg.heads,
                                       zero_init_out=cfg.zero_init_out, dtype=dtype)
        self.ffn = FeedForward(rng, cfg.C, cfg.ffn_expansion, dtype=dtype)
        self.ln_cross = LayerNorm(cfg.C, dtype=dtype)
        self.ln_self = LayerNorm(cfg.C, dtype=dtype)
        self.ln_ffn = LayerNorm(cfg.C, dtype=dtype)

    def __call__(self, q, feat_tokens, attn_mask, pos, frozen_g=None):
        q_in = self.ln_cross(q) + pos
        q, g = self.cross(q_in, q, feat_tokens, attn_mask, frozen_g=frozen_g)
        qn = self.ln_self(q)
        q = self.self_attn.inner(qn + pos, q, qn + pos, None, value_feat=qn)[0]
        q = q + self.ffn(self.ln_ffn(q))
        return q, g


class PredictionHead(Module):
    """Mask embedding MLP + linear classifier (with a "no object" column)."""

    def __init__(self, rng, c, c_px, num_classes, dtype=np.float64):
        self.norm = LayerNorm(c, dtype=dtype)
        self.embed_a = Linear(rng, c, c, dtype=dtype)
        self.embed_b = Linear(rng, c, c_px, dtype=dtype)
        self.classifier = Linear(rng, c, num_classes + 1, dtype=dtype)

    def __call__(self, q, f1):
        c_px, h1, w1 = f1.shape
        qn = self.norm(q)
        embed = self.embed_b(T.relu(self.embed_a(qn)))          # [N, C_px]
        logits = T.matmul(embed, T.reshape(f1, c_px, h1 * w1))  # [N, H1*W1]
        return MaskPrediction(
            mask_logits=T.reshape(logits, q.shape[0], h1, w1),
            class_logits=self.classifier(qn),
        )


class SegModel(Module):
    """Stub backbone + pixel decoder + decoder stack; one forward pass yields
    one prediction per decoder layer plus the bootstrap prediction."""

    SCALE_ORDER = (3, 2, 1)  # pyramid indices: stride 32, 16, 8

    def __init__(self, cfg, dtype=np.float64):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.backbone = StubBackbone(rng, cfg.backbone_widths, dtype=dtype)
        self.pixel_decoder = PixelDecoder(rng, cfg.backbone_widths, cfg.C_px,
                                          cfg.csm_bottleneck, norm=cfg.pixel_norm,
                                          dtype=dtype)
        self.input_proj = [Linear(rng, cfg.C_px, cfg.C, dtype=dtype) for _ in range(3)]
        self.query_embed = uniform_init(rng, (cfg.num_queries, cfg.C), scale=0.5, dtype=dtype)
        self.query_pos = uniform_init(rng, (cfg.num_queries, cfg.C), scale=0.5, dtype=dtype)
        self.blocks = [DecoderBlock(rng, cfg, dtype=dtype) for _ in range(cfg.num_layers)]
        self.head = PredictionHead(rng, cfg.C, cfg.C_px, cfg.num_classes, dtype=dtype)

    def forward(self, image, depth=None, frozen=None):
        """Run the full pipeline. Returns (predictions, DecisionLog).

        depth truncates the decoder to its first `depth` blocks; frozen
        replays a previous DecisionLog (masks and prototype selections).
        """
        cfg = self.cfg
        n_blocks = cfg.num_layers if depth is None else min(depth, cfg.num_layers)
        feats = self.backbone(image)
        pyramid = self.pixel_decoder(feats)
        f1 = pyramid[0]
        log = DecisionLog()

        q = self.query_embed
        preds = [self.head(q, f1)]
        for i in range(n_blocks):
            scale = self.SCALE_ORDER[i % 3]
            fmap = pyramid[scale]
            c_px, h_i, w_i = fmap.shape
            tokens = self.input_proj[i % 3](T.transpose(T.reshape(fmap, c_px, h_i * w_i), (1, 0)))
            if frozen is not None:
                attn_mask = frozen.masks[i]
                frozen_g = frozen.selections[i]
            else:
                attn_mask = build_attention_mask(preds[-1].mask_logits, (h_i, w_i))
                frozen_g = None
            q, g = self.blocks[i](q, tokens, attn_mask, self.query_pos, frozen_g=frozen_g)
            log.masks.append(attn_mask)
            log.selections.append(g)
            preds.append(self.head(q, f1))
        return preds, log


def class_probabilities(class_logits, mode="bce"):
    """[N, K+1] logits -> probabilities over the K real classes."""
    z = class_logits.data if isinstance(class_logits, Tensor) else np.asarray(class_logits)
    if mode == "softmax":
        e = np.exp(z - z.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
    else:
        p = 1.0 / (1.0 + np.exp(-z))
    return p[:, :-1]  # drop "no object"


def semantic_inference(pred, cls_mode="bce"):
    """Per-pixel class map: argmax_k sum_q p_q(k) * sigmoid(mask_q)."""
    probs = class_probabilities(pred.class_logits, cls_mode)          # [N, K]
    masks = 1.0 / (1.0 + np.exp(-pred.mask_logits.data))              # [N, H, W]
    n, h, w = masks.shape
    scores = probs.T @ masks.reshape(n, h * w)                        # [K, H*W]
    return np.argmax(scores, axis=0).reshape(h, w)


def panoptic_inference(pred, thing_classes=(), confidence=0.8, overlap=0.8,
                       cls_mode="bce"):
    """Greedy panoptic readout.

    Queries are filtered by class confidence; each pixel goes to its
    highest-scoring surviving query; segments keeping less than `overlap`
    of their original mask are dropped; stuff segments merge per class.
    Returns (segment_map [H,W] with -1 for void, segment list).
    """
    if not (0.0 < confidence < 1.0 and 0.0 < overlap < 1.0):
        raise ValueError("thresholds must lie in (0, 1)")
    probs = class_probabilities(pred.class_logits, cls_mode)          # [N, K]
    masks = 1.0 / (1.0 + np.exp(-pred.mask_logits.data))              # [N, H, W]
    n, h, w = masks.shape
    labels = probs.argmax(axis=1)
    scores = probs.max(axis=1)
    keep = scores > confidence
    seg_map = np.full((h, w), -1, dtype=np.int64)
    segments = []
    if not np.any(keep):
        return seg_map, segments
    idx = np.flatnonzero(keep)
    weighted = scores[idx, None, None] * masks[idx]                   # [n_keep, H, W]
    assign = np.argmax(weighted, axis=0)                              # index into idx
    best = np.max(weighted, axis=0)
    valid = best > 0
    stuff_ids = {}
    next_id = 0
    for j, qi in enumerate(idx):
        own = (assign == j) & valid & (masks[qi] > 0.5)
        orig = masks[qi] > 0.5
        if orig.sum() == 0 or own.sum() / orig.sum() < overlap:
            continue
        cls = int(labels[qi])
        is_thing = cls in thing_classes
        if not is_thing and cls in stuff_ids:
            seg_id = stuff_ids[cls]
        else:
            seg_id = next_id
            next_id += 1
            if not is_thing:
                stuff_ids[cls] = seg_id
            segments.append({"id": seg_id, "class": cls, "is_thing": is_thing})
        seg_map[own] = seg_id
    return seg_map, segments
