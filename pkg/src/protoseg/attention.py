"""Prototype-based masked cross-attention and the baseline attention variants.

The prototype path replaces softmax attention over HW visual tokens with a
per-(head, query) argmax selection; everything after the selection touches
only N tokens.
"""

import numpy as np

from . import tensor as T
from .module import Linear, Module, uniform_init, zeros_init
from .tensor import Tensor

NEG_INF = -np.inf
NORM_EPS = 1e-6


def build_attention_mask(mask_logits, target_hw):
    """Turn previous-layer mask logits [N,H,W] into an additive mask [HW, N].

    Logits are bilinearly resized to target_hw, binarized at logit > 0
    (sigmoid > 0.5); foreground maps to 0, background to -inf.
    """
    h, w = target_hw
    if h <= 0 or w <= 0:
        raise ValueError("target resolution must be positive")
    logits = mask_logits.data if isinstance(mask_logits, Tensor) else np.asarray(mask_logits)
    if logits.ndim == 2:  # [N, HW] at an unknown square resolution is ambiguous
        raise ValueError("mask logits must be [N, H, W]")
    resized = T.resize_bilinear(Tensor(logits), (h, w)).data  # [N, h, w]
    fg = resized > 0
    mask = np.where(fg, 0.0, NEG_INF)
    # contiguous [N, HW] buffer exposed through the [HW, N] contract view
    return np.ascontiguousarray(mask.reshape(logits.shape[0], h * w)).T


def select_prototypes(K, Q, attn_mask, heads):
    """Pick the most similar pixel per (head, query).

    K: [HW, D], Q: [N, D], attn_mask: [HW, N] additive {0,-inf} or None.
    Returns (G: int array [heads, N], K_p: Tensor [N, D]). Queries whose
    mask is -inf everywhere fall back to an unmasked argmax. Ties break to
    the lowest flat index.
    """
    hw, d = K.shape
    n = Q.shape[0]
    dh = d // heads
    kd, qd = K.data, Q.data
    g = np.empty((heads, n), dtype=np.int64)
    if attn_mask is not None:
        # [N, HW] layout keeps the mask add and argmax scans contiguous;
        # masks built by build_attention_mask transpose back without a copy
        mask_t = np.ascontiguousarray(attn_mask.T)
        infeasible = ~np.any(mask_t == 0.0, axis=1)
        any_infeasible = bool(infeasible.any())
    # score tiles stay cache-resident and each K tile is read once for all
    # heads; ties still break to the lowest flat index because later tiles
    # only win on strictly greater scores
    chunk = 4096
    q_heads = [np.ascontiguousarray(qd[:, h * dh:(h + 1) * dh]) for h in range(heads)]
    best = np.full((heads, n), -np.inf, dtype=qd.dtype)
    best_raw = np.full((heads, n), -np.inf, dtype=qd.dtype)
    idx_raw = np.zeros((heads, n), dtype=np.int64)
    g[:] = 0
    for start in range(0, hw, chunk):
        stop = min(start + chunk, hw)
        kc = kd[start:stop]  # contiguous row block
        mc = mask_t[:, start:stop] if attn_mask is not None else None
        for h in range(heads):
            scores = q_heads[h] @ kc[:, h * dh:(h + 1) * dh].T  # [N, stop-start]
            if mc is not None:
                if any_infeasible:
                    raw_local = np.argmax(scores[infeasible], axis=1)
                    raw_val = np.take_along_axis(scores[infeasible], raw_local[:, None], 1)[:, 0]
                    win = raw_val > best_raw[h, infeasible]
                    sub = np.flatnonzero(infeasible)[win]
                    best_raw[h, sub] = raw_val[win]
                    idx_raw[h, sub] = raw_local[win] + start
                np.add(scores, mc, out=scores)
            local = np.argmax(scores, axis=1)
            val = np.take_along_axis(scores, local[:, None], 1)[:, 0]
            win = val > best[h]
            best[h, win] = val[win]
            g[h, win] = local[win] + start
    if attn_mask is not None and any_infeasible:
        g[:, infeasible] = idx_raw[:, infeasible]
    k_p = T.concat([_gather_cols(K, g[h], slice(h * dh, (h + 1) * dh))
                    for h in range(heads)], axis=1)
    return g, k_p


def _gather_cols(K, idx, col_slice):
    """Rows idx of K restricted to a channel slice, with gradient flow."""
    d = K.shape[1]
    gathered = T.gather_rows(K, idx)  # [N, D]
    start, stop = col_slice.start, col_slice.stop
    sel = np.zeros((d, stop - start), dtype=K.dtype)
    sel[start:stop] = np.eye(stop - start, dtype=K.dtype)
    return T.matmul(gathered, Tensor(sel, dtype=K.dtype))


def prototype_cross_attention(Q, K_p, Q_in, w_a, alpha, w_out, eps=NORM_EPS):
    """Query/prototype interaction via elementwise product plus projections.

    A = (Q * K_p) W_A; B = alpha * A / ||A||_2 + K_p (row-wise norm over
    channels, eps inside the sqrt); Q_out = B W_out + Q_in.
    """
    a = T.matmul(Q * K_p, w_a)
    norm = T.l2_norm(a, axis=1, keepdims=True, eps=eps)
    b = alpha * (a / norm) + K_p
    return T.matmul(b, w_out) + Q_in


class PemcaAttention(Module):
    """PEM-CA and its ablations (no-mask, no-prototype)."""

    def __init__(self, rng, C, D, heads, masking=True, prototypes=True,
                 zero_init_out=False, dtype=np.float64):
        self.wq = Linear(rng, C, D, bias=False, dtype=dtype)
        self.wk = Linear(rng, C, D, bias=False, dtype=dtype)
        self.w_a = uniform_init(rng, (D, D), dtype=dtype)
        self.alpha = Tensor(np.ones(D, dtype=dtype), requires_grad=True, dtype=dtype)
        self.w_out = (zeros_init((D, C), dtype) if zero_init_out
                      else uniform_init(rng, (D, C), dtype=dtype))
        self.heads = heads
        self.masking = masking
        self.prototypes = prototypes

    def project_qk(self, feat, q_input):
        """Independent no-bias projections of features and queries to width D."""
        return self.wk(feat), self.wq(q_input)

    def __call__(self, q_input, q_residual, feat, attn_mask, frozen_g=None):
        """q_input: [N,C] (normalized+positional), q_residual: [N,C] raw,
        feat: [HW,C], attn_mask: [HW,N] or None. Returns (Q_out, G)."""
        k, q = self.project_qk(feat, q_input)
        mask = attn_mask if self.masking else None
        if self.prototypes:
            if frozen_g is not None:
                g = frozen_g
                dh = k.shape[1] // self.heads
                k_p = T.concat([_gather_cols(k, g[h], slice(h * dh, (h + 1) * dh))
                                for h in range(self.heads)], axis=1)
            else:
                g, k_p = select_prototypes(k, q, mask, self.heads)
        else:
            # token aggregation by masked summation over foreground pixels
            g = None
            hw, n = feat.shape[0], q.shape[0]
            if mask is not None:
                fg = (mask == 0.0).astype(k.dtype)  # [HW, N]
                empty = fg.sum(axis=0) == 0
                fg[:, empty] = 1.0
            else:
                fg = np.ones((hw, n), dtype=k.dtype)
            k_p = T.matmul(Tensor(fg.T, dtype=k.dtype), k)  # [N, D]
        q_out = prototype_cross_attention(q, k_p, q_residual, self.w_a, self.alpha, self.w_out)
        return q_out, g


class SoftmaxCrossAttention(Module):
    """Mask2Former-style multi-head cross-attention reference (masked or plain)."""

    def __init__(self, rng, C, D, heads, masking=True, zero_init_out=False, dtype=np.float64):
        self.wq = Linear(rng, C, D, bias=False, dtype=dtype)
        self.wk = Linear(rng, C, D, bias=False, dtype=dtype)
        self.wv = Linear(rng, C, D, bias=False, dtype=dtype)
        self.wo = (zeros_init((D, C), dtype) if zero_init_out
                   else uniform_init(rng, (D, C), dtype=dtype))
        self.heads = heads
        self.masking = masking

    def __call__(self, q_input, q_residual, feat, attn_mask, frozen_g=None,
                 value_feat=None):
        n, _ = q_input.shape
        hw = feat.shape[0]
        h = self.heads
        q = self.wq(q_input)
        k = self.wk(feat)
        v = self.wv(feat if value_feat is None else value_feat)
        dh = q.shape[1] // h
        qh = T.transpose(T.reshape(q, n, h, dh), (1, 0, 2))   # [h, N, dh]
        kh = T.transpose(T.reshape(k, hw, h, dh), (1, 2, 0))  # [h, dh, HW]
        vh = T.transpose(T.reshape(v, hw, h, dh), (1, 0, 2))  # [h, HW, dh]
        scores = T.matmul(qh, kh) * (1.0 / np.sqrt(dh))       # [h, N, HW]
        add_mask = None
        if self.masking and attn_mask is not None:
            add_mask = attn_mask.T[None, :, :]                # [1, N, HW]
        attn = T.softmax(scores, axis=-1, additive_mask=add_mask)
        out = T.matmul(attn, vh)                              # [h, N, dh]
        out = T.reshape(T.transpose(out, (1, 0, 2)), n, h * dh)
        return T.matmul(out, self.wo) + q_residual, None


class SelfAttention(Module):
    """Standard multi-head self-attention over the N queries."""

    def __init__(self, rng, C, heads, zero_init_out=False, dtype=np.float64):
        self.inner = SoftmaxCrossAttention(rng, C, C, heads, masking=False,
                                           zero_init_out=zero_init_out, dtype=dtype)

    def __call__(self, q_input, q_residual):
        out, _ = self.inner(q_input, q_residual, q_input, None)
        return out


def make_cross_attention(rng, cfg, dtype=np.float64):
    """Build the attention layer named by cfg.variant."""
    common = dict(dtype=dtype, zero_init_out=cfg.zero_init_out)
    if cfg.variant == "pemca":
        return PemcaAttention(rng, cfg.C, cfg.D, cfg.heads, masking=True,
                              prototypes=True, **common)
    if cfg.variant == "pemca_no_mask":
        return PemcaAttention(rng, cfg.C, cfg.D, cfg.heads, masking=False,
                              prototypes=True, **common)
    if cfg.variant == "pemca_no_proto":
        return PemcaAttention(rng, cfg.C, cfg.D, cfg.heads, masking=True,
                              prototypes=False, **common)
    if cfg.variant == "masked_ca":
        return SoftmaxCrossAttention(rng, cfg.C, cfg.D, cfg.heads, masking=True, **common)
    if cfg.variant == "plain_ca":
        return SoftmaxCrossAttention(rng, cfg.C, cfg.D, cfg.heads, masking=False, **common)
    raise ValueError(cfg.variant)
