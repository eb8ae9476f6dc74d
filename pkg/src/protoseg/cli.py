"""Command-line interface.

Report-producing subcommands write a delimited file (csv or markdown) and
render a matplotlib figure alongside it. Exit code 2 signals a failed
acceptance gate.
"""

import dataclasses
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import bench, checkpoint, metrics, plots
from .config import VARIANTS, ModelConfig
from .model import SegModel, panoptic_inference, semantic_inference
from .tensor import Tensor
from .toy import evaluate_semantic, make_toy_dataset, train_toy

GATE_FAILED = 2


def toy_config(seed=0, variant="pemca", num_queries=8):
    """Small configuration used by the toy fixtures and sweeps."""
    return ModelConfig(stages=2, num_queries=num_queries, C=32, D=32, heads=4,
                       ffn_expansion=8, C_px=16, variant=variant, num_classes=4,
                       seed=seed, backbone_widths=(8, 16, 32, 32))


def _load_config(path, seed):
    cfg = ModelConfig.load(path) if path else toy_config(seed=seed)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def _figure_path(out):
    return str(Path(out).with_suffix(".png"))


@click.group()
def main():
    """Prototype-based segmentation decoder: benchmarks, sweeps, toy training."""


@main.command("bench-attention")
@click.option("--variants", default="pemca,masked_ca", show_default=True,
              help=f"comma-separated subset of {','.join(VARIANTS)}")
@click.option("--tokens", default=",".join(str(t) for t in bench.DEFAULT_TOKEN_COUNTS),
              show_default=True, help="comma-separated token counts (HW)")
@click.option("--queries", "-n", default=100, show_default=True)
@click.option("--width", "-c", default=256, show_default=True)
@click.option("--heads", default=8, show_default=True)
@click.option("--reps", default=10, show_default=True)
@click.option("--runs", default=1, show_default=True,
              help="consecutive runs (2+ enables the stability gate)")
@click.option("--seed", default=0, show_default=True)
@click.option("--precision", type=click.Choice(["f32", "f64"]), default="f32",
              show_default=True)
@click.option("--out", default="bench_attention.csv", show_default=True)
@click.option("--format", "fmt", type=click.Choice(["csv", "markdown"]), default="csv",
              show_default=True)
def bench_attention(variants, tokens, queries, width, heads, reps, runs, seed,
                    precision, out, fmt):
    """Measure attention latency over the token-count ladder and gate the
    scaling trend (speedup non-decreasing, >= 1.5x at the largest HW)."""
    spec = bench.BenchSpec(
        variants=tuple(variants.split(",")),
        token_counts=tuple(int(t) for t in tokens.split(",")),
        N=queries, C=width, D=width, heads=heads, reps=reps,
        precision=precision, seed=seed)
    all_rows = []
    run_results = []
    for run in range(runs):
        rows = bench.measure_latency(spec)
        for r in rows:
            r["run"] = run
        run_results.append(rows)
        all_rows.extend(rows)
    meta = {"precision": precision, "threads": 1, "seed": seed,
            "flop_convention": bench.FLOP_CONVENTION}
    bench.emit_report(all_rows, out, fmt, metadata=meta)
    plots.latency_figure(all_rows, _figure_path(out))
    click.echo(f"wrote {out} and {_figure_path(out)}")

    failed = False
    if {"pemca", "masked_ca"} <= set(spec.variants) and len(spec.token_counts) >= 2:
        ok, details = bench.check_scaling_gate(run_results[0])
        click.echo(f"scaling gate: {'PASS' if ok else 'FAIL'} "
                   f"(ladder={[(hw, round(s, 3)) for hw, s in details['ladder']]})")
        failed |= not ok
    if runs >= 2:
        ok, details = bench.check_stability(run_results[0], run_results[1])
        click.echo(f"stability gate: {'PASS' if ok else 'FAIL'} "
                   f"(worst rel diff={details['worst_rel_diff']:.3f})")
        failed |= not ok
    if failed:
        sys.exit(GATE_FAILED)


@main.command("flops")
@click.option("--variants", default=",".join(VARIANTS), show_default=True)
@click.option("--tokens", default=",".join(str(t) for t in bench.DEFAULT_TOKEN_COUNTS),
              show_default=True)
@click.option("--queries", "-n", default=100, show_default=True)
@click.option("--width", "-c", default=256, show_default=True)
@click.option("--heads", default=8, show_default=True)
@click.option("--out", default="flops.csv", show_default=True)
@click.option("--format", "fmt", type=click.Choice(["csv", "markdown"]), default="csv",
              show_default=True)
def flops(variants, tokens, queries, width, heads, out, fmt):
    """Analytic FLOPs table for the attention variants."""
    spec = bench.BenchSpec(
        variants=tuple(variants.split(",")),
        token_counts=tuple(int(t) for t in tokens.split(",")),
        N=queries, C=width, D=width, heads=heads)
    rows = bench.flops_rows(spec)
    bench.emit_report(rows, out, fmt, metadata={"flop_convention": bench.FLOP_CONVENTION})
    plots.sweep_figure(sorted(rows, key=lambda r: (r["variant"], r["HW"])),
                       "HW", ["total"], _figure_path(out))
    click.echo(f"wrote {out} and {_figure_path(out)}")


@main.command("sweep-layers")
@click.option("--config", "config_path", default=None, help="model config JSON")
@click.option("--checkpoint", "ckpt_path", default=None, help="optional weights")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default="sweep_layers.csv", show_default=True)
@click.option("--format", "fmt", type=click.Choice(["csv", "markdown"]), default="csv",
              show_default=True)
def sweep_layers(config_path, ckpt_path, seed, out, fmt):
    """Metric and latency at every truncated decoder depth (0..L)."""
    cfg = _load_config(config_path, seed)
    model = SegModel(cfg)
    if ckpt_path:
        checkpoint.load_model(ckpt_path, model)
    dataset = make_toy_dataset(np.random.default_rng(cfg.seed), num_classes=cfg.num_classes)
    rows = bench.sweep_decoder_layers(model, dataset)
    bench.emit_report(rows, out, fmt, metadata={"config_hash": cfg.digest(), "seed": cfg.seed})
    plots.sweep_figure(rows, "depth", ["loss", "miou"], _figure_path(out))
    click.echo(f"wrote {out} and {_figure_path(out)}")


@main.command("sweep-queries")
@click.option("--config", "config_path", default=None)
@click.option("--queries", default="50,100,200", show_default=True)
@click.option("--steps", default=0, show_default=True, help="training steps per point")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default="sweep_queries.csv", show_default=True)
@click.option("--format", "fmt", type=click.Choice(["csv", "markdown"]), default="csv",
              show_default=True)
def sweep_queries_cmd(config_path, queries, steps, seed, out, fmt):
    """Rebuild the model per query count; report loss, mIoU, FLOPs."""
    cfg = _load_config(config_path, seed)
    counts = tuple(int(q) for q in queries.split(","))
    rows = bench.sweep_queries(cfg, counts, steps=steps)
    bench.emit_report(rows, out, fmt, metadata={"config_hash": cfg.digest(), "seed": cfg.seed})
    plots.sweep_figure(rows, "queries", ["loss", "miou"], _figure_path(out))
    click.echo(f"wrote {out} and {_figure_path(out)}")


@main.command("train-toy")
@click.option("--config", "config_path", default=None)
@click.option("--steps", default=200, show_default=True)
@click.option("--lr", default=2e-3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default="train_toy.csv", show_default=True,
              help="per-layer loss breakdown CSV; curve PNG and checkpoint alongside")
@click.option("--format", "fmt", type=click.Choice(["csv", "markdown"]), default="csv",
              show_default=True)
def train_toy_cmd(config_path, steps, lr, seed, out, fmt):
    """Train on the synthetic rectangle fixture; gate: final loss < 10% of
    the initial loss."""
    cfg = _load_config(config_path, seed)
    dataset = make_toy_dataset(np.random.default_rng(cfg.seed), num_classes=cfg.num_classes)
    model, trajectory = train_toy(cfg, dataset, steps=steps, lr=lr,
                                  on_step=lambda s, l: click.echo(f"step {s}: loss {l:.4f}")
                                  if s % 20 == 0 else None)
    rows = []
    for entry in trajectory:
        for img_i, breakdown in enumerate(entry["breakdown"]):
            for layer_i, terms in enumerate(breakdown):
                if terms is None:
                    continue
                rows.append({"step": entry["step"], "image": img_i, "layer": layer_i,
                             **{k: terms[k] for k in ("cls", "bce", "dice", "total")}})
    bench.emit_report(rows, out, fmt, metadata={"config_hash": cfg.digest(), "seed": cfg.seed})
    plots.loss_curve_figure(trajectory, _figure_path(out))
    ckpt = str(Path(out).with_suffix(".ckpt"))
    checkpoint.save_model(ckpt, model)
    score = evaluate_semantic(model, dataset)
    initial, final = trajectory[0]["loss"], trajectory[-1]["loss"]
    click.echo(f"initial loss {initial:.4f}, final loss {final:.4f}, train mIoU {score:.3f}")
    click.echo(f"wrote {out}, {_figure_path(out)}, {ckpt}")
    if final >= 0.1 * initial:
        click.echo("loss gate: FAIL (final >= 10% of initial)")
        sys.exit(GATE_FAILED)
    click.echo("loss gate: PASS")


@main.command("forward")
@click.option("--config", "config_path", required=True)
@click.option("--checkpoint", "ckpt_path", default=None)
@click.option("--image", "image_path", required=True,
              help="tensor file containing an array named 'image' [3,H,W]")
@click.option("--out", default="predictions.bin", show_default=True)
def forward_cmd(config_path, ckpt_path, image_path, out):
    """Run the model; write predictions as a tensor file plus a JSON summary."""
    cfg = ModelConfig.load(config_path)
    model = SegModel(cfg)
    if ckpt_path:
        checkpoint.load_model(ckpt_path, model)
    arrays = checkpoint.load_arrays(image_path)
    if "image" not in arrays:
        raise click.ClickException("image file must contain an array named 'image'")
    preds, _ = model.forward(Tensor(arrays["image"]))
    out_arrays = {}
    for i, p in enumerate(preds):
        out_arrays[f"mask_logits_{i}"] = p.mask_logits.data
        out_arrays[f"class_logits_{i}"] = p.class_logits.data
    final = preds[-1]
    out_arrays["semantic"] = semantic_inference(final, cls_mode=cfg.cls_loss)
    seg_map, segs = panoptic_inference(final, cfg.thing_classes,
                                       cfg.confidence_threshold, cfg.overlap_threshold,
                                       cls_mode=cfg.cls_loss)
    out_arrays["panoptic"] = seg_map
    checkpoint.save_arrays(out, out_arrays)
    summary = {
        "config_hash": cfg.digest(),
        "num_predictions": len(preds),
        "mask_shape": list(final.mask_logits.shape),
        "class_shape": list(final.class_logits.shape),
        "panoptic_segments": segs,
    }
    summary_path = str(Path(out).with_suffix(".json"))
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=2)
    click.echo(f"wrote {out} and {summary_path}")


@main.command("evaluate")
@click.option("--pred", "pred_path", required=True,
              help="tensor file with 'labels' [H,W] and optional 'instances'")
@click.option("--gt", "gt_path", required=True)
@click.option("--classes", "num_classes", required=True, type=int)
@click.option("--things", default="", help="comma-separated thing class ids")
@click.option("--out", default="metrics.json", show_default=True)
def evaluate_cmd(pred_path, gt_path, num_classes, things, out):
    """Compute mIoU (and PQ when instance ids are present)."""
    pred = checkpoint.load_arrays(pred_path)
    gt = checkpoint.load_arrays(gt_path)
    thing_classes = tuple(int(t) for t in things.split(",") if t)
    mean, per_class = metrics.miou(pred["labels"], gt["labels"], num_classes)
    report = {"miou": mean, "per_class_iou": {str(k): v for k, v in per_class.items()}}
    if "instances" in pred and "instances" in gt:
        report["panoptic"] = metrics.panoptic_quality(
            _instances_to_segments(pred), _instances_to_segments(gt), thing_classes)
        report["panoptic"].pop("stats")
    with open(out, "w") as fh:
        json.dump(report, fh, indent=2)
    click.echo(json.dumps({k: v for k, v in report.items() if k != "per_class_iou"}))
    click.echo(f"wrote {out}")


def _instances_to_segments(arrays):
    labels, instances = arrays["labels"], arrays["instances"]
    segments = []
    for inst in np.unique(instances):
        if inst < 0:
            continue
        mask = instances == inst
        vals, counts = np.unique(labels[mask], return_counts=True)
        segments.append({"class": int(vals[np.argmax(counts)]), "mask": mask})
    return segments


@main.command("selftest")
@click.option("--seed", default=0, show_default=True)
def selftest(seed):
    """Fast structural gates (selection, deformable conv, matching, FLOPs,
    metric identities). Exit code 2 on any failure."""
    from . import selftest as st

    results = st.run_selftest(seed)
    failed = False
    for name, ok, info in results:
        click.echo(f"{'PASS' if ok else 'FAIL'}  {name}  {info}")
        failed |= not ok
    if failed:
        sys.exit(GATE_FAILED)
    click.echo("all selftests passed")


if __name__ == "__main__":
    main()
