"""Set-prediction objective: bipartite matching between predictions and
ground-truth segments, BCE/Dice mask losses, per-class BCE classification,
and deep-supervision aggregation."""

import dataclasses

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .tensor import Tensor

DICE_EPS = 1.0


@dataclasses.dataclass
class GroundTruthSegment:
    class_id: int
    mask: np.ndarray  # binary [H1, W1]

    def __post_init__(self):
        self.mask = np.asarray(self.mask)
        if self.mask.sum() == 0:
            raise ValueError("ground-truth segment mask must be nonempty")
        if self.class_id < 0:
            raise ValueError("invalid class id")


@dataclasses.dataclass
class Assignment:
    """Injective query<->segment pairing; unmatched queries mean 'no object'."""
    pairs: list  # [(query_index, segment_index)]

    def matched_queries(self):
        return {q for q, _ in self.pairs}


def dice_loss(pred_logits, target):
    """Soft Dice on sigmoid(pred) vs a {0,1} target, smoothing eps = 1."""
    p = T.sigmoid(pred_logits)
    t = np.asarray(target, dtype=float).ravel()
    p = T.reshape(p, -1)
    inter = T.reduce_sum(p * t)
    denom = T.reduce_sum(p) + float(t.sum()) + DICE_EPS
    return 1.0 - (2.0 * inter + DICE_EPS) / denom


def mask_bce(pred_logits, target):
    """Mean binary cross-entropy in the numerically stable logit form."""
    x = T.reshape(pred_logits, -1)
    t = np.asarray(target, dtype=float).ravel()
    # max(x,0) - x*t + log(1 + exp(-|x|))
    pos = T.relu(x)
    absx = T.relu(x) + T.relu(-x)
    return T.reduce_mean(pos - x * t + T.log(1.0 + T.exp(-absx)))


def cls_loss(class_logits, assignment, num_classes, no_object_weight=1.0,
             gt_classes=None, mode="bce"):
    """Per-query classification loss against the matched one-hot target.

    Unmatched queries target the K+1-th "no object" column. mode="bce"
    treats each column as an independent binary classifier; mode="softmax"
    uses cross-entropy over the K+1 columns.
    """
    n, kp1 = class_logits.shape
    target = np.zeros((n, kp1))
    target[:, num_classes] = 1.0  # default: no object
    weights = np.full(n, no_object_weight, dtype=float)
    for q, s in assignment.pairs:
        target[q] = 0.0
        target[q, gt_classes[s]] = 1.0
        weights[q] = 1.0
    if mode == "softmax":
        logp = T.log(T.softmax(class_logits, axis=1))
        per_query = -T.reduce_sum(logp * target, axis=1)
    else:
        x = class_logits
        pos = T.relu(x)
        absx = T.relu(x) + T.relu(-x)
        per_elem = pos - x * target + T.log(1.0 + T.exp(-absx))
        per_query = T.reduce_mean(per_elem, axis=1)
    return T.reduce_sum(per_query * weights) / float(weights.sum())


def _pairwise_mask_costs(mask_logits, gt_masks):
    """Pairwise stable BCE and Dice costs (numpy; used only for matching)."""
    x = mask_logits.reshape(mask_logits.shape[0], -1)   # [N, P]
    t = gt_masks.reshape(gt_masks.shape[0], -1)         # [M, P]
    p = x.shape[1]
    s = 1.0 / (1.0 + np.exp(-x))
    pos_term = (np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))).sum(axis=1)  # [N]
    bce = (pos_term[:, None] - x @ t.T) / p
    inter = s @ t.T
    dice = 1.0 - (2.0 * inter + DICE_EPS) / (s.sum(axis=1)[:, None] + t.sum(axis=1)[None, :] + DICE_EPS)
    return bce, dice


def build_cost_matrix(pred, gt_segments, weights=(2.0, 5.0, 5.0), cls_mode="bce"):
    """cost[q, s] = w_cls * cls + w_bce * bce + w_dice * dice, pairwise.

    The classification term uses post-sigmoid (or softmax) probabilities:
    cost_cls = -p_q(class_s). Mask terms use stable logit forms.
    """
    if len(gt_segments) == 0:
        raise ValueError("need at least one ground-truth segment")
    w_cls, w_bce, w_dice = weights
    logits = pred.class_logits.data
    if cls_mode == "softmax":
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs = e / e.sum(axis=1, keepdims=True)
    else:
        probs = 1.0 / (1.0 + np.exp(-logits))
    classes = np.array([g.class_id for g in gt_segments])
    cls_cost = -probs[:, classes]                                # [N, M]
    gt_masks = np.stack([g.mask for g in gt_segments]).astype(float)
    bce, dice = _pairwise_mask_costs(pred.mask_logits.data, gt_masks)
    cost = w_cls * cls_cost + w_bce * bce + w_dice * dice
    if not np.all(np.isfinite(cost)):
        raise ValueError("non-finite entries in the cost matrix")
    return cost


def hungarian_match(cost):
    """Minimum-cost injective assignment of a rectangular cost matrix."""
    cost = np.asarray(cost)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    return Assignment(pairs=sorted(zip(rows.tolist(), cols.tolist())))


def matched_loss(pred, gt_segments, assignment, cfg):
    """Weighted loss terms for one prediction under a fixed assignment."""
    gt_classes = [g.class_id for g in gt_segments]
    l_cls = cls_loss(pred.class_logits, assignment, cfg.num_classes,
                     cfg.no_object_weight, gt_classes, mode=cfg.cls_loss)
    n_pairs = max(len(assignment.pairs), 1)
    l_bce, l_dice = Tensor(0.0), Tensor(0.0)
    for q, s in assignment.pairs:
        row = T.reshape(T.gather_rows(
            T.reshape(pred.mask_logits, pred.mask_logits.shape[0], -1),
            np.array([q])), -1)
        l_bce = l_bce + mask_bce(row, gt_segments[s].mask)
        l_dice = l_dice + dice_loss(row, gt_segments[s].mask)
    l_bce = l_bce / n_pairs
    l_dice = l_dice / n_pairs
    terms = {
        "cls": cfg.loss_weight_cls * l_cls,
        "bce": cfg.loss_weight_bce * l_bce,
        "dice": cfg.loss_weight_dice * l_dice,
    }
    total = terms["cls"] + terms["bce"] + terms["dice"]
    return total, terms


def total_loss(preds, gt_segments, cfg, frozen_assignments=None):
    """Deep-supervised loss over all predictions.

    Each prediction is matched and scored independently; returns
    (scalar total, per-layer breakdown, assignments). If the bootstrap
    prediction is not supervised it is skipped but keeps its slot in the
    breakdown for bookkeeping.
    """
    if len(preds) == 0:
        raise ValueError("need at least one prediction")
    weights = (cfg.loss_weight_cls, cfg.loss_weight_bce, cfg.loss_weight_dice)
    total = Tensor(0.0)
    breakdown = []
    assignments = []
    for li, pred in enumerate(preds):
        if li == 0 and not cfg.supervise_bootstrap:
            breakdown.append(None)
            assignments.append(None)
            continue
        if frozen_assignments is not None and frozen_assignments[li] is not None:
            assign = frozen_assignments[li]
        else:
            cost = build_cost_matrix(pred, gt_segments, weights, cfg.cls_loss)
            assign = hungarian_match(cost)
        layer_total, terms = matched_loss(pred, gt_segments, assign, cfg)
        total = total + layer_total
        breakdown.append({k: v.item() for k, v in terms.items()} | {"total": layer_total.item()})
        assignments.append(assign)
    return total, breakdown, assignments
