"""Synthetic rectangle fixtures and a small end-to-end training loop used
for sanity checks and the sweep commands."""

import numpy as np

from .losses import GroundTruthSegment, total_loss
from .model import SegModel, semantic_inference
from .module import Adam
from .metrics import miou
from .tensor import Tensor


def make_toy_dataset(rng=None, n_images=2, size=64, max_rects=3, num_classes=4):
    """Colored rectangles on a noisy background.

    Class 0 is the background; rectangle class k gets a distinctive color.
    Ground-truth masks live at stride-4 resolution, matching the mask head.
    Returns a list of (image Tensor [3,H,W], [GroundTruthSegment]).
    """
    rng = rng or np.random.default_rng(0)
    palette = np.array([
        [0.1, 0.1, 0.1],
        [0.9, 0.1, 0.1],
        [0.1, 0.9, 0.1],
        [0.1, 0.1, 0.9],
        [0.9, 0.9, 0.1],
        [0.9, 0.1, 0.9],
    ])
    h4 = size // 4
    data = []
    for _ in range(n_images):
        label = np.zeros((h4, h4), dtype=np.int64)
        n_rects = rng.integers(1, max_rects + 1)
        for r in range(n_rects):
            cls = 1 + int(rng.integers(0, num_classes - 1))
            rh = int(rng.integers(3, h4 // 2 + 1))
            rw = int(rng.integers(3, h4 // 2 + 1))
            r0 = int(rng.integers(0, h4 - rh))
            c0 = int(rng.integers(0, h4 - rw))
            label[r0:r0 + rh, c0:c0 + rw] = cls
        image = np.empty((3, size, size))
        up = np.kron(label, np.ones((4, 4), dtype=np.int64))
        for ch in range(3):
            image[ch] = palette[up, ch]
        image += rng.normal(0, 0.05, size=image.shape)
        segments = []
        for cls in np.unique(label):
            segments.append(GroundTruthSegment(class_id=int(cls), mask=(label == cls)))
        data.append((Tensor(image), segments, label))
    return data


def train_toy(cfg, dataset=None, steps=200, lr=2e-3, on_step=None):
    """Gradient-descent loop over the deep-supervised loss.

    Returns (model, trajectory). trajectory[i] holds the total loss and the
    per-layer breakdown before the i-th update; a non-finite loss aborts
    with the offending step index.
    """
    if dataset is None:
        dataset = make_toy_dataset(np.random.default_rng(cfg.seed),
                                   num_classes=cfg.num_classes)
    model = SegModel(cfg)
    opt = Adam(model.named_parameters(), lr=lr)
    trajectory = []
    for step in range(steps):
        opt.zero_grad()
        step_total = 0.0
        breakdowns = []
        for image, segments, _ in dataset:
            preds, _ = model.forward(image)
            loss, breakdown, _ = total_loss(preds, segments, cfg)
            if not np.isfinite(loss.item()):
                raise RuntimeError(f"training diverged at step {step}")
            loss.backward()
            step_total += loss.item()
            breakdowns.append(breakdown)
        opt.step()
        trajectory.append({"step": step, "loss": step_total, "breakdown": breakdowns})
        if on_step is not None:
            on_step(step, step_total)
    return model, trajectory


def evaluate_semantic(model, dataset):
    """mIoU of the final prediction against the fixture labels, per image mean."""
    scores = []
    for image, _, label in dataset:
        preds, _ = model.forward(image)
        sem = semantic_inference(preds[-1], cls_mode=model.cfg.cls_loss)
        score, _ = miou(sem, label, model.cfg.num_classes)
        scores.append(score)
    return float(np.mean(scores))
