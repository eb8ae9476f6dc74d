"""Evaluation metrics: mean IoU and Panoptic Quality (with SQ/RQ split)."""

import dataclasses

import numpy as np


@dataclasses.dataclass
class PqStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0


def miou(pred, gt, num_classes):
    """Mean intersection-over-union. Classes absent from both maps are
    excluded from the mean. Returns (mean, per-class dict)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    per_class = {}
    for k in range(num_classes):
        p = pred == k
        g = gt == k
        union = np.logical_or(p, g).sum()
        if union == 0:
            continue
        per_class[k] = np.logical_and(p, g).sum() / union
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return mean, per_class


def _segment_iou(a, b):
    inter = np.logical_and(a, b).sum()
    if inter == 0:
        return 0.0
    return inter / np.logical_or(a, b).sum()


def panoptic_quality(pred_segments, gt_segments, thing_classes=()):
    """PQ with its SQ/RQ decomposition plus thing/stuff splits.

    Segments are dicts {"class": id, "mask": bool [H,W]}. A prediction
    matches a ground-truth segment of the same class when IoU > 0.5
    (such a match is unique). Empty inputs give PQ = 0 by convention.
    """
    stats = {}

    def stat(cls):
        return stats.setdefault(cls, PqStats())

    matched_pred, matched_gt = set(), set()
    for gi, g in enumerate(gt_segments):
        for pi, p in enumerate(pred_segments):
            if pi in matched_pred or p["class"] != g["class"]:
                continue
            iou = _segment_iou(p["mask"], g["mask"])
            if iou > 0.5:
                s = stat(g["class"])
                s.tp += 1
                s.iou_sum += iou
                matched_pred.add(pi)
                matched_gt.add(gi)
                break
    for gi, g in enumerate(gt_segments):
        if gi not in matched_gt:
            stat(g["class"]).fn += 1
    for pi, p in enumerate(pred_segments):
        if pi not in matched_pred:
            stat(p["class"]).fp += 1

    def aggregate(classes):
        pqs = []
        for cls in classes:
            s = stats[cls]
            denom = s.tp + 0.5 * s.fp + 0.5 * s.fn
            pqs.append(s.iou_sum / denom if denom > 0 else 0.0)
        return float(np.mean(pqs)) if pqs else 0.0

    all_classes = sorted(stats)
    tp = sum(s.tp for s in stats.values())
    fp = sum(s.fp for s in stats.values())
    fn = sum(s.fn for s in stats.values())
    iou_sum = sum(s.iou_sum for s in stats.values())
    # pooled definition, so PQ == SQ * RQ holds as an identity
    sq = iou_sum / tp if tp > 0 else 0.0
    rq = tp / (tp + 0.5 * fp + 0.5 * fn) if (tp + fp + fn) > 0 else 0.0
    return {
        "PQ": iou_sum / (tp + 0.5 * fp + 0.5 * fn) if (tp + fp + fn) > 0 else 0.0,
        "SQ": sq,
        "RQ": rq,
        "PQ_th": aggregate([c for c in all_classes if c in thing_classes]),
        "PQ_st": aggregate([c for c in all_classes if c not in thing_classes]),
        "stats": {cls: dataclasses.asdict(s) for cls, s in stats.items()},
    }


def segments_from_label_map(seg_map, seg_meta):
    """Convert a segment-id map + metadata into {"class", "mask"} dicts."""
    out = []
    for meta in seg_meta:
        mask = seg_map == meta["id"]
        if mask.any():
            out.append({"class": meta["class"], "mask": mask})
    return out
