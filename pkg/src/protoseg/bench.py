"""Microbenchmark and analytic-FLOPs harness for the attention variants.

Latency is wall-clock (median + IQR over repetitions, single-threaded);
FLOPs come from a closed-form cost model counting 2 per multiply-add.
"""

import csv
import dataclasses
import io
import statistics
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .attention import PemcaAttention, SoftmaxCrossAttention
from .config import VARIANTS, ModelConfig
from .tensor import Tensor

FLOP_CONVENTION = "2 FLOPs per multiply-add"
DEFAULT_TOKEN_COUNTS = (2048, 8192, 32768, 131072)
MASK_FOREGROUND_DENSITY = 0.25


@dataclasses.dataclass
class BenchSpec:
    variants: tuple = ("pemca", "masked_ca")
    token_counts: tuple = DEFAULT_TOKEN_COUNTS
    N: int = 100
    C: int = 256
    D: int = 256
    heads: int = 8
    reps: int = 10
    warmup: int = 3
    precision: str = "f32"
    seed: int = 0

    def __post_init__(self):
        self.variants = tuple(self.variants)
        self.token_counts = tuple(sorted(self.token_counts))
        if self.reps < 10:
            raise ValueError("repetitions must be >= 10")
        if self.warmup < 3:
            raise ValueError("warmup must be >= 3")
        for v in self.variants:
            if v not in VARIANTS:
                raise ValueError(f"unknown variant {v!r}")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be f32 or f64")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


def count_flops(variant, hw, n, c, d, heads):
    """Itemized closed-form multiply-add counts (2 FLOPs each) for one
    attention call. Each term carries whether it scales with HW."""
    if min(hw, n, c, d, heads) <= 0:
        raise ValueError("dimensions must be positive")
    terms = {}

    def term(name, flops, hw_dependent):
        terms[name] = {"flops": int(flops), "hw_dependent": hw_dependent}

    term("q_projection", 2 * n * c * d, False)
    term("k_projection", 2 * hw * c * d, True)
    if variant in ("pemca", "pemca_no_mask", "pemca_no_proto"):
        if variant == "pemca_no_proto":
            term("token_aggregation", 2 * hw * n * d, True)
        else:
            term("similarity", 2 * hw * n * d, True)
        # everything past the selection touches only N tokens
        term("interaction_projection", 2 * n * d * d, False)
        term("elementwise_product", n * d, False)
        term("normalization", 4 * n * d, False)
        term("output_projection", 2 * n * d * c, False)
    elif variant in ("masked_ca", "plain_ca"):
        term("v_projection", 2 * hw * c * d, True)
        term("scores", 2 * hw * n * d, True)
        term("softmax", 5 * hw * n, True)
        term("aggregation", 2 * hw * n * d, True)
        term("output_projection", 2 * n * d * c, False)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    total = sum(t["flops"] for t in terms.values())
    hw_dependent_total = sum(t["flops"] for t in terms.values() if t["hw_dependent"])
    return {"variant": variant, "HW": hw, "N": n, "C": c, "D": d, "heads": heads,
            "terms": terms, "total": total, "hw_dependent_total": hw_dependent_total,
            "convention": FLOP_CONVENTION}


def estimate_peak_bytes(variant, hw, n, c, d, heads, itemsize):
    """Rough peak of simultaneously live arrays for one attention call."""
    live = hw * c + n * c          # inputs
    live += hw * d + n * d         # projections
    if variant in ("masked_ca", "plain_ca"):
        live += hw * d             # values
        live += 2 * n * hw         # scores + attention weights
        live += hw * n             # additive mask
    else:
        live += hw * n             # one per-head score matrix is dominant
        live += hw * n             # additive mask
        live += 3 * n * d          # prototypes and interaction buffers
    return int(live * itemsize)


def _random_mask(rng, hw, n, density=MASK_FOREGROUND_DENSITY):
    """Additive {0,-inf} mask with the given foreground density and at
    least one foreground pixel per query."""
    fg = rng.random((n, hw)) < density
    empty = ~fg.any(axis=1)
    if empty.any():
        fg[np.flatnonzero(empty), rng.integers(0, hw, size=int(empty.sum()))] = True
    # contiguous [N, HW] base so the [HW, N] view transposes back for free
    return np.where(fg, 0.0, -np.inf).T


def build_kernel(variant, hw, spec, rng):
    """Fixed random inputs + layer for one (variant, HW) cell; returns a
    zero-argument callable."""
    dtype = spec.dtype
    cfg = ModelConfig(C=spec.C, D=spec.D, heads=spec.heads, num_queries=spec.N,
                      variant=variant, seed=spec.seed)
    feat = Tensor(rng.standard_normal((hw, spec.C)).astype(dtype), dtype=dtype)
    q_in = Tensor(rng.standard_normal((spec.N, spec.C)).astype(dtype), dtype=dtype)
    mask = _random_mask(rng, hw, spec.N)
    if variant in ("pemca", "pemca_no_mask", "pemca_no_proto"):
        layer = PemcaAttention(rng, cfg.C, cfg.D, cfg.heads,
                               masking=variant != "pemca_no_mask",
                               prototypes=variant != "pemca_no_proto", dtype=dtype)
    else:
        layer = SoftmaxCrossAttention(rng, cfg.C, cfg.D, cfg.heads,
                                      masking=variant == "masked_ca", dtype=dtype)

    def run():
        return layer(q_in, q_in, feat, mask)

    return run


def _calibrate_inner(fn):
    """Inner-loop count auto-raised until one timed block is >= 1 ms."""
    inner = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        if time.perf_counter() - t0 >= 1e-3 or inner >= 1024:
            return inner
        inner *= 2


def _timed_block(fn, inner):
    t0 = time.perf_counter()
    for _ in range(inner):
        fn()
    return (time.perf_counter() - t0) / inner


def measure_latency(spec):
    """Run the benchmark grid; returns a list of result rows.

    Variants are interleaved within each repetition sweep so that slow
    drift in background machine load affects every variant at a given HW
    equally instead of biasing their latency ratios.
    """
    rows = []
    with threadpool_limits(limits=1), T.finite_checks(False):
        for hw in spec.token_counts:
            cells = []
            for variant in spec.variants:
                rng = np.random.default_rng(spec.seed)
                fn = build_kernel(variant, hw, spec, rng)
                for _ in range(spec.warmup):
                    fn()
                cells.append((variant, fn, _calibrate_inner(fn), []))
            for _ in range(spec.reps):
                for variant, fn, inner, samples in cells:
                    samples.append(_timed_block(fn, inner))
            for variant, fn, inner, samples in cells:
                med = statistics.median(samples)
                q1, q3 = np.percentile(samples, [25, 75])
                flops = count_flops(variant, hw, spec.N, spec.C, spec.D, spec.heads)
                rows.append({
                    "variant": variant,
                    "HW": hw,
                    "N": spec.N, "C": spec.C, "D": spec.D, "heads": spec.heads,
                    "median_s": med,
                    "iqr_s": float(q3 - q1),
                    "min_s": min(samples),
                    "max_s": max(samples),
                    "reps": spec.reps,
                    "inner_loop": inner,
                    "warmup": spec.warmup,
                    "flops_total": flops["total"],
                    "mem_bytes_estimate": estimate_peak_bytes(
                        variant, hw, spec.N, spec.C, spec.D, spec.heads,
                        np.dtype(spec.dtype).itemsize),
                    "precision": spec.precision,
                    "threads": 1,
                    "seed": spec.seed,
                    "mask_density": MASK_FOREGROUND_DENSITY,
                    "flop_convention": FLOP_CONVENTION,
                })
    return rows


def speedup_ladder(rows, fast="pemca", slow="masked_ca"):
    """Median-latency speedup slow/fast per HW, ascending in HW."""
    med = {(r["variant"], r["HW"]): r["median_s"] for r in rows}
    hws = sorted({r["HW"] for r in rows})
    return [(hw, med[(slow, hw)] / med[(fast, hw)]) for hw in hws
            if (fast, hw) in med and (slow, hw) in med]


def check_scaling_gate(rows, min_top_speedup=1.5, tolerance=1e-9):
    """Latency-scaling gate: speedup non-decreasing in HW and above the
    floor at the largest HW. Returns (ok, details)."""
    ladder = speedup_ladder(rows)
    if len(ladder) < 2:
        return False, {"error": "need pemca and masked_ca on >= 2 token counts"}
    ratios = [s for _, s in ladder]
    monotone = all(b >= a - tolerance for a, b in zip(ratios, ratios[1:]))
    top_ok = ratios[-1] >= min_top_speedup
    return monotone and top_ok, {
        "ladder": ladder,
        "monotone": monotone,
        "top_speedup": ratios[-1],
        "min_top_speedup": min_top_speedup,
    }


def check_stability(rows_a, rows_b, rel_tol=0.2):
    """Two consecutive runs must agree on medians within rel_tol."""
    med_b = {(r["variant"], r["HW"]): r["median_s"] for r in rows_b}
    worst = 0.0
    for r in rows_a:
        other = med_b[(r["variant"], r["HW"])]
        rel = abs(r["median_s"] - other) / max(r["median_s"], other)
        worst = max(worst, rel)
    return worst <= rel_tol, {"worst_rel_diff": worst, "rel_tol": rel_tol}


def flops_rows(spec):
    """Itemized FLOPs table over the (variant, HW) grid."""
    rows = []
    for variant in spec.variants:
        for hw in spec.token_counts:
            fl = count_flops(variant, hw, spec.N, spec.C, spec.D, spec.heads)
            row = {"variant": variant, "HW": hw, "N": spec.N, "C": spec.C,
                   "D": spec.D, "heads": spec.heads,
                   "total": fl["total"], "hw_dependent_total": fl["hw_dependent_total"],
                   "flop_convention": FLOP_CONVENTION}
            for name, t in fl["terms"].items():
                row[f"term_{name}"] = t["flops"]
            rows.append(row)
    return rows


def sweep_decoder_layers(model, dataset):
    """Forward at every truncated decoder depth; reports loss, mIoU, latency."""
    from .losses import total_loss
    from .metrics import miou as miou_fn
    from .model import semantic_inference

    cfg = model.cfg
    rows = []
    with threadpool_limits(limits=1):
        for depth in range(cfg.num_layers + 1):
            losses, scores = [], []
            t0 = time.perf_counter()
            for image, segments, label in dataset:
                preds, _ = model.forward(image, depth=depth)
                loss, _, _ = total_loss(preds, segments, cfg)
                losses.append(loss.item())
                sem = semantic_inference(preds[-1], cls_mode=cfg.cls_loss)
                scores.append(miou_fn(sem, label, cfg.num_classes)[0])
            elapsed = time.perf_counter() - t0
            rows.append({"depth": depth, "predictions": depth + 1,
                         "loss": float(np.mean(losses)),
                         "miou": float(np.mean(scores)),
                         "latency_s": elapsed / len(dataset)})
    return rows


def sweep_queries(base_cfg, query_counts=(50, 100, 200), steps=0, size=64):
    """Rebuild and (optionally) train the toy model per query count."""
    from .losses import total_loss
    from .toy import evaluate_semantic, make_toy_dataset, train_toy

    rows = []
    for n in query_counts:
        cfg = dataclasses.replace(base_cfg, num_queries=n)
        dataset = make_toy_dataset(np.random.default_rng(cfg.seed), size=size,
                                   num_classes=cfg.num_classes)
        if steps > 0:
            model, traj = train_toy(cfg, dataset, steps=steps)
            final_loss = traj[-1]["loss"]
        else:
            from .model import SegModel
            model = SegModel(cfg)
            final_loss = sum(
                total_loss(model.forward(img)[0], segs, cfg)[0].item()
                for img, segs, _ in dataset)
        score = evaluate_semantic(model, dataset)
        # attention FLOPs summed over the decoder blocks at the fixture scales
        h1 = size // 4
        scale_hw = {3: (h1 // 8) ** 2, 2: (h1 // 4) ** 2, 1: (h1 // 2) ** 2}
        flops = sum(count_flops(cfg.variant, scale_hw[[3, 2, 1][i % 3]],
                                n, cfg.C, cfg.D, cfg.heads)["total"]
                    for i in range(cfg.num_layers))
        rows.append({"queries": n, "loss": final_loss, "miou": score,
                     "attention_flops": flops, "train_steps": steps})
    return rows


def emit_report(rows, path, fmt="csv", metadata=None):
    """Write rows as CSV or a markdown table with a deterministic column
    order (first-seen across rows); metadata fields are appended to every
    row so the file round-trips through a plain CSV parser."""
    rows = [dict(r) for r in rows]
    if metadata:
        for r in rows:
            r.update(metadata)
    columns = []
    for r in rows:
        for k in r:
            if k not in columns:
                columns.append(k)
    text = render_rows(rows, columns, fmt)
    with open(path, "w") as fh:
        fh.write(text)
    return columns


def render_rows(rows, columns, fmt):
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=columns)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r.get(k, "") for k in columns})
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(columns) + " |",
                 "| " + " | ".join("---" for _ in columns) + " |"]
        for r in rows:
            lines.append("| " + " | ".join(str(r.get(k, "")) for k in columns) + " |")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def parse_csv_report(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))
