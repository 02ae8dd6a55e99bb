import json

import pytest
from click.testing import CliRunner

from incseg.cli import main
from incseg.data import SyntheticSpec, generate_synthetic


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = SyntheticSpec(image_size=64, n_pretrain=2, n_incremental=1,
                         min_new_class_pixels=50, seed=4)
    generate_synthetic(spec, root / "data")
    return root


@pytest.fixture(scope="module")
def checkpoint(workspace):
    runner = CliRunner()
    ckpt = workspace / "model.ckpt"
    result = runner.invoke(main, [
        "pretrain", str(workspace / "data" / "manifest.json"), str(ckpt),
        "--pseudo-epochs", "1", "--samples-per-pseudo-epoch", "40",
        "--crop-size", "32", "--batch-size", "4", "--base-width", "8",
        "--learning-rate", "1e-3", "--seed", "0",
    ])
    assert result.exit_code == 0, result.output
    return ckpt


def test_pretrain_writes_checkpoint(checkpoint):
    assert checkpoint.exists()


def test_pretrain_missing_manifest(tmp_path):
    result = CliRunner().invoke(main, ["pretrain", str(tmp_path / "no.json"), str(tmp_path / "c")])
    assert result.exit_code != 0


def test_increment_reports_mean_std(workspace, checkpoint):
    out = workspace / "report.json"
    result = CliRunner().invoke(main, [
        "increment", str(checkpoint), str(workspace / "data" / "manifest.json"), str(out),
        "--budget", "20", "--seeds", "2", "--steps", "2", "--iterations-per-step", "1",
        "--selection-window", "2", "--batch-size", "2", "--crop-size", "32",
        "--regularizer", "none",
    ])
    assert result.exit_code == 0, result.output
    payload = json.loads(out.read_text())
    assert payload["config"]["regularizer"] == "none"
    assert "inputs_hash" in payload["config"]
    assert payload["report"]["n_runs"] == 2
    assert len(payload["report"]["per_run_miou"]) == 2
    assert out.with_suffix(".tsv").exists()


def test_sweep_emits_curve_and_plot(workspace, checkpoint):
    out = workspace / "curve.csv"
    result = CliRunner().invoke(main, [
        "sweep", str(checkpoint), str(workspace / "data" / "manifest.json"), str(out),
        "--budgets", "5,10", "--seeds", "1", "--steps", "1", "--iterations-per-step", "1",
        "--selection-window", "1", "--batch-size", "2", "--crop-size", "32",
        "--regularizer", "none",
    ])
    assert result.exit_code == 0, result.output
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "budget,miou_mean,miou_std"
    assert len(lines) == 3
    assert out.with_suffix(".png").exists()


def test_eval_deterministic(workspace, checkpoint):
    results = []
    for name in ("eval_a.json", "eval_b.json"):
        out = workspace / name
        result = CliRunner().invoke(main, [
            "eval", str(checkpoint), str(workspace / "data" / "manifest.json"), str(out),
        ])
        assert result.exit_code == 0, result.output
        results.append(json.loads(out.read_text())["report"])
    assert results[0] == results[1]


def test_control_network_path(workspace):
    # control: pretrain directly on all classes, never fine-tuned
    runner = CliRunner()
    ckpt = workspace / "control.ckpt"
    result = runner.invoke(main, [
        "pretrain", str(workspace / "data" / "manifest.json"), str(ckpt),
        "--pseudo-epochs", "1", "--samples-per-pseudo-epoch", "20",
        "--crop-size", "32", "--batch-size", "4", "--base-width", "8",
        "--include-new-class",
    ])
    assert result.exit_code == 0, result.output
    out = workspace / "control_eval.json"
    result = runner.invoke(main, [
        "eval", str(ckpt), str(workspace / "data" / "manifest.json"), str(out),
    ])
    assert result.exit_code == 0, result.output
    report = json.loads(out.read_text())["report"]
    assert "rect" in report["classes"]


def test_make_synthetic(tmp_path):
    result = CliRunner().invoke(main, [
        "make-synthetic", str(tmp_path / "d"), "--image-size", "64",
        "--n-pretrain", "1", "--n-incremental", "1",
    ])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "d" / "manifest.json").exists()
