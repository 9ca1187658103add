"""Command-line pipeline: subcommands, exit codes, artifacts."""

import json
import math
import subprocess
import sys

import numpy as np
import pytest

from scenewipe import report
from scenewipe.cli import main
from scenewipe.colmap_model import parse_model
from scenewipe.dataset import load_dataset, make_mask_predictor
from scenewipe.field import VoxelField, load_checkpoint, save_checkpoint
from scenewipe.imgio import depth_filename, read_pfm
from scenewipe.masks import load_mask_png, mask_filename
from scenewipe.propagation import (
    PointPrompt,
    PromptSet,
    propagate_points,
    sample_points_from_mask,
    save_prompts,
)
from scenewipe.train import load_loss_history


def write_initial_prompts(dataset_dir, path):
    """Prompt file for view_000 (model id 1) seeded from its object mask."""
    gt = load_mask_png(dataset_dir / "masks" / mask_filename("view_000.png"))
    initial = sample_points_from_mask(gt, view_id=1)
    save_prompts(PromptSet(prompts={1: initial}, m=len(initial)), path)
    return initial


def test_synth_writes_dataset(tmp_path, capsys):
    out = tmp_path / "ds"
    assert main(["synth", "--out", str(out), "--seed", "1"]) == 0
    assert "wrote dataset" in capsys.readouterr().out
    for sub in ("images", "masks", "depth", "priors"):
        assert (out / sub).is_dir()
    model = parse_model(out / "sparse")
    assert len(model.images) == 8


def test_parse_model_report(dataset_dir, capsys):
    assert main(["parse-model", "--model", str(dataset_dir / "sparse")]) == 0
    captured = capsys.readouterr().out
    assert "cameras: 1" in captured
    assert "view_000.png" in captured
    assert captured.rstrip().endswith("ok")


def test_propagate_matches_library(tmp_path, dataset_dir, capsys):
    prompts_path = tmp_path / "prompts.json"
    initial = write_initial_prompts(dataset_dir, prompts_path)
    out = tmp_path / "out"
    rc = main(
        [
            "propagate",
            "--model",
            str(dataset_dir),
            "--prompts",
            str(prompts_path),
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    assert "propagated to 8 view(s), 0 dropped" in capsys.readouterr().out

    dataset = load_dataset(dataset_dir)
    predictor = make_mask_predictor("oracle", dataset)
    expected = propagate_points(
        dataset.model, initial, predictor.predict(dataset.images[1], initial.points)
    )
    from scenewipe.propagation import load_prompts

    got = load_prompts(out / "prompts_propagated.json")
    assert got == expected

    # oracle mask predictions written per view, equal to ground truth
    for view_id in dataset.view_ids():
        name = dataset.images[view_id].name
        written = load_mask_png(out / mask_filename(name))
        gt = load_mask_png(dataset_dir / "masks" / mask_filename(name))
        assert np.array_equal(written.bitmap, gt.bitmap)


def test_text_prompt_pipeline(tmp_path, dataset_dir):
    out = tmp_path / "tp"
    rc = main(
        [
            "text-prompt",
            "--model",
            str(dataset_dir),
            "--text",
            "the box",
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    assert (out / "prompts.json").is_file()
    gt = load_mask_png(dataset_dir / "masks" / mask_filename("view_003.png"))
    written = load_mask_png(out / mask_filename("view_003.png"))
    assert np.array_equal(written.bitmap, gt.bitmap)


def test_train_render_evaluate_chain(tmp_path, dataset_dir, capsys):
    ckpt = tmp_path / "field.ornf"
    rc = main(
        [
            "train",
            "--model",
            str(dataset_dir),
            "--out",
            str(ckpt),
            "--steps",
            "5",
            "--ray-batch",
            "32",
            "--n-samples",
            "8",
            "--patch-size",
            "8",
            "--patch-batch",
            "1",
            "--resolution",
            "8",
            "--mode",
            "da",
        ]
    )
    assert rc == 0
    assert ckpt.is_file()

    history = load_loss_history(f"{ckpt}.loss.csv")
    assert len(history) == 5
    with open(f"{ckpt}.loss.png", "rb") as f:
        assert f.read(4) == b"\x89PNG"

    depth_dir = tmp_path / "depth"
    rc = main(
        [
            "render-depth",
            "--field",
            str(ckpt),
            "--model",
            str(dataset_dir),
            "--out",
            str(depth_dir),
            "--samples",
            "8",
        ]
    )
    assert rc == 0
    rendered = read_pfm(depth_dir / depth_filename("view_000.png"))
    assert rendered.shape == (64, 64)

    metrics_csv = tmp_path / "metrics.csv"
    rc = main(
        [
            "evaluate",
            "--field",
            str(ckpt),
            "--gt",
            str(dataset_dir),
            "--out",
            str(metrics_csv),
            "--samples",
            "8",
        ]
    )
    assert rc == 0
    out_text = capsys.readouterr().out
    assert "mean acc=1.0000" in out_text
    assert "mean iou=1.0000" in out_text
    rows = report.load_metrics_csv(metrics_csv)
    assert len(rows) == 9  # 8 views + mean row
    assert rows[-1][0] == "mean"
    assert all(math.isfinite(r[3]) for r in rows)
    assert metrics_csv.with_suffix(".png").is_file()


def test_train_print_config_precedence(tmp_path, dataset_dir, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"steps": 7, "lr": 0.01, "t_far": 9.5}))
    rc = main(
        [
            "train",
            "--model",
            str(dataset_dir),
            "--config",
            str(cfg),
            "--steps",
            "9",
            "--print-config",
        ]
    )
    assert rc == 0
    merged = json.loads(capsys.readouterr().out)
    assert merged["steps"] == 9  # flag beats config file
    assert merged["lr"] == 0.01  # config file beats defaults
    assert merged["t_far"] == 9.5  # config file beats scene-derived
    near, _ = load_dataset(dataset_dir).ray_bounds()
    assert merged["t_near"] == pytest.approx(near)  # scene-derived
    assert merged["resolution"] == [64, 64, 64]


def test_train_print_config_defaults_without_model(capsys):
    assert main(["train", "--print-config"]) == 0
    merged = json.loads(capsys.readouterr().out)
    assert merged["steps"] == 2000
    assert merged["depth_mode"] == "da"


def test_train_without_out_is_data_error(dataset_dir, capsys):
    assert main(["train", "--model", str(dataset_dir)]) == 3
    assert "error" in capsys.readouterr().err


def test_bad_flag_value_exits_usage(dataset_dir):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--model", str(dataset_dir), "--resolution", "5,5"])
    assert exc.value.code == 2


def test_inverted_ray_bounds_exit_code(tmp_path, dataset_dir):
    ckpt = tmp_path / "flat.ornf"
    save_checkpoint(VoxelField.create((2, 2, 2), (0, 0, 0), (1, 1, 1)), ckpt)
    rc = main(
        [
            "render-depth",
            "--field",
            str(ckpt),
            "--model",
            str(dataset_dir),
            "--out",
            str(tmp_path / "d"),
            "--near",
            "2.0",
            "--far",
            "1.0",
        ]
    )
    assert rc == 2


def test_missing_prompts_file_json_error(tmp_path, dataset_dir, capsys):
    rc = main(
        [
            "--json",
            "propagate",
            "--model",
            str(dataset_dir),
            "--prompts",
            str(tmp_path / "nope.json"),
            "--out",
            str(tmp_path / "out"),
        ]
    )
    assert rc == 3
    payload = json.loads(capsys.readouterr().err)
    assert payload["error"] == "DataError"
    assert "nope.json" in payload["message"]


def test_missing_predictor_binary_exit_code(tmp_path, dataset_dir, capsys):
    prompts_path = tmp_path / "prompts.json"
    write_initial_prompts(dataset_dir, prompts_path)
    rc = main(
        [
            "--json",
            "propagate",
            "--model",
            str(dataset_dir),
            "--prompts",
            str(prompts_path),
            "--mask-predictor",
            "exec:/no/such/tool",
            "--out",
            str(tmp_path / "out"),
        ]
    )
    assert rc == 4
    assert json.loads(capsys.readouterr().err)["error"] == "ExternalToolError"


def test_console_script_smoke(dataset_dir):
    proc = subprocess.run(
        [
            sys.executable,
            "-c",
            "import sys; from scenewipe.cli import main; sys.exit(main(sys.argv[1:]))",
            "parse-model",
            "--model",
            str(dataset_dir / "sparse"),
        ],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert "ok" in proc.stdout


# ---------------------------------------------------------------------------
# Report helpers
# ---------------------------------------------------------------------------


def test_metrics_csv_round_trip_with_inf(tmp_path):
    rows = [("view_000.png", 1.0, 0.5, 24.25), ("view_001.png", 0.75, 0.25, float("inf"))]
    path = tmp_path / "m.csv"
    report.save_metrics_csv(rows, path)
    back = report.load_metrics_csv(path)
    assert len(back) == 3
    assert back[0] == ("view_000.png", 1.0, 0.5, 24.25)
    assert math.isinf(back[1][3])
    mean = back[2]
    assert mean[0] == "mean"
    assert mean[1] == pytest.approx(0.875)
    # mean psnr averages the finite entries only
    assert mean[3] == pytest.approx(24.25)


def test_figures_render_png(tmp_path):
    history = [(s, 0.5 / (s + 1), 0.0, 0.1, 0.6 / (s + 1)) for s in range(4)]
    loss_path = tmp_path / "loss.png"
    report.save_loss_figure(history, loss_path)
    with open(loss_path, "rb") as f:
        assert f.read(4) == b"\x89PNG"

    rows = [("a.png", 1.0, 1.0, 30.0), ("b.png", 0.9, 0.8, float("inf"))]
    fig_path = tmp_path / "metrics.png"
    report.save_metrics_figure(rows, fig_path)
    with open(fig_path, "rb") as f:
        assert f.read(4) == b"\x89PNG"
