"""End-to-end CLI coverage: every subcommand, file outputs, exit codes."""

import dataclasses
import json

import numpy as np
import pytest
from click.testing import CliRunner

from protoseg import checkpoint
from protoseg.cli import GATE_FAILED, main, toy_config
from protoseg.config import ModelConfig


@pytest.fixture
def runner():
    return CliRunner()


def small_config_file(tmp_path, **kw):
    cfg = dataclasses.replace(toy_config(), stages=1, **kw)
    path = tmp_path / "config.json"
    cfg.save(path)
    return path, cfg


def test_bench_attention_writes_report_and_figure(tmp_path, runner):
    out = tmp_path / "bench.csv"
    result = runner.invoke(main, [
        "bench-attention", "--variants", "pemca", "--tokens", "64,128",
        "-n", "8", "-c", "16", "--heads", "2", "--reps", "10",
        "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert out.exists() and out.with_suffix(".png").exists()
    text = out.read_text()
    assert "median_s" in text and "pemca" in text


def test_bench_attention_markdown_format(tmp_path, runner):
    out = tmp_path / "bench.md"
    result = runner.invoke(main, [
        "bench-attention", "--variants", "pemca", "--tokens", "64",
        "-n", "4", "-c", "8", "--heads", "2", "--reps", "10",
        "--out", str(out), "--format", "markdown"])
    assert result.exit_code == 0, result.output
    assert out.read_text().startswith("| variant |")


def test_flops_command(tmp_path, runner):
    out = tmp_path / "flops.csv"
    result = runner.invoke(main, ["flops", "--tokens", "256,1024",
                                  "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert out.exists() and out.with_suffix(".png").exists()
    header = out.read_text().splitlines()[0]
    assert "hw_dependent_total" in header


def test_sweep_layers_command(tmp_path, runner):
    cfg_path, cfg = small_config_file(tmp_path)
    out = tmp_path / "layers.csv"
    result = runner.invoke(main, ["sweep-layers", "--config", str(cfg_path),
                                  "--out", str(out)])
    assert result.exit_code == 0, result.output
    rows = out.read_text().strip().splitlines()
    assert len(rows) == 1 + cfg.num_layers + 1  # header + depths 0..L
    assert out.with_suffix(".png").exists()


def test_sweep_queries_command(tmp_path, runner):
    out = tmp_path / "queries.csv"
    result = runner.invoke(main, ["sweep-queries", "--queries", "2,4",
                                  "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert out.exists() and out.with_suffix(".png").exists()


def test_train_toy_short_run_fails_loss_gate(tmp_path, runner):
    out = tmp_path / "train.csv"
    result = runner.invoke(main, ["train-toy", "--steps", "2",
                                  "--out", str(out)])
    # two steps cannot reach 10% of the initial loss, but artifacts exist
    assert result.exit_code == GATE_FAILED
    assert "loss gate: FAIL" in result.output
    assert out.exists()
    assert out.with_suffix(".png").exists()
    assert out.with_suffix(".ckpt").exists()


def test_forward_and_evaluate_commands(tmp_path, runner):
    cfg_path, cfg = small_config_file(tmp_path)
    rng = np.random.default_rng(0)
    image_path = tmp_path / "image.bin"
    checkpoint.save_arrays(image_path, {"image": rng.standard_normal((3, 32, 32))})
    out = tmp_path / "pred.bin"
    result = runner.invoke(main, ["forward", "--config", str(cfg_path),
                                  "--image", str(image_path), "--out", str(out)])
    assert result.exit_code == 0, result.output
    arrays = checkpoint.load_arrays(out)
    n_preds = cfg.num_layers + 1
    for i in range(n_preds):
        assert f"mask_logits_{i}" in arrays and f"class_logits_{i}" in arrays
    assert arrays["semantic"].shape == (8, 8)
    assert arrays["panoptic"].shape == (8, 8)
    summary = json.loads(out.with_suffix(".json").read_text())
    assert summary["num_predictions"] == n_preds

    # score the semantic output against itself: perfect mIoU
    labels_path = tmp_path / "labels.bin"
    checkpoint.save_arrays(labels_path, {"labels": arrays["semantic"]})
    metrics_out = tmp_path / "metrics.json"
    result = runner.invoke(main, ["evaluate", "--pred", str(labels_path),
                                  "--gt", str(labels_path),
                                  "--classes", str(cfg.num_classes),
                                  "--out", str(metrics_out)])
    assert result.exit_code == 0, result.output
    report = json.loads(metrics_out.read_text())
    assert report["miou"] == 1.0


def test_evaluate_with_instances_reports_pq(tmp_path, runner):
    labels = np.zeros((6, 6), dtype=np.int64)
    labels[:3] = 1
    instances = np.zeros((6, 6), dtype=np.int64)
    instances[:3] = 1
    path = tmp_path / "gt.bin"
    checkpoint.save_arrays(path, {"labels": labels, "instances": instances})
    out = tmp_path / "metrics.json"
    result = runner.invoke(main, ["evaluate", "--pred", str(path),
                                  "--gt", str(path), "--classes", "2",
                                  "--things", "1", "--out", str(out)])
    assert result.exit_code == 0, result.output
    report = json.loads(out.read_text())
    assert report["panoptic"]["PQ"] == 1.0


def test_forward_rejects_missing_image_array(tmp_path, runner):
    cfg_path, _ = small_config_file(tmp_path)
    bad = tmp_path / "bad.bin"
    checkpoint.save_arrays(bad, {"not_image": np.zeros((3, 32, 32))})
    result = runner.invoke(main, ["forward", "--config", str(cfg_path),
                                  "--image", str(bad)])
    assert result.exit_code != 0


def test_selftest_command(runner):
    result = runner.invoke(main, ["selftest"])
    assert result.exit_code == 0, result.output
    assert "all selftests passed" in result.output
    assert result.output.count("PASS") == 6
