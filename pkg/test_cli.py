import json
import shutil

import numpy as np
import pytest

import main
from roadsplat.cli import reconstruct as reconstruct_cli
from roadsplat.cli.common import CHECKPOINT_FILE, METRICS_FILE, RUN_MANIFEST_FILE, load_train_config
from roadsplat.cli.evaluate import cmd_evaluate, format_report, load_ground_truth
from roadsplat.cli.reconstruct import cmd_reconstruct
from roadsplat.cli.synth import cmd_synth
from roadsplat.core.exceptions import DivergedScene, InputError, MissingGT, SceneDirectoryError
from roadsplat.models import ReconstructOptions, TrainConfig
from roadsplat.storage.bev_export import read_bev_maps
from roadsplat.storage.checkpoint import checkpoint_load
from roadsplat.storage.scene_directory import ANALYTIC_GT_DIR, CLOUDS_DIR

OPTIONS = ReconstructOptions(resolution=0.25, expand=3.0, threads=1)


@pytest.fixture
def spec_file(tiny_spec, tmp_path):
    path = tmp_path / "tiny.spec"
    path.write_text(tiny_spec.model_dump_json(indent=2), encoding="utf-8")
    return path


@pytest.fixture
def scene_dir(spec_file, tmp_path):
    return cmd_synth(spec_file, tmp_path / "scene", threads=1)


def test_synth_writes_a_scene_directory(scene_dir):
    for name in ("manifest.json", "poses.txt", "cameras.json", "images", "labels", CLOUDS_DIR, ANALYTIC_GT_DIR):
        assert (scene_dir / name).exists(), name
    exposure = json.loads((scene_dir / ANALYTIC_GT_DIR / "exposure.json").read_text())
    assert sorted(exposure) == ["cam0", "cam1"]


def test_reconstruct_writes_all_outputs(scene_dir, tmp_path):
    output = cmd_reconstruct(scene_dir, tmp_path / "run", TrainConfig(epochs=1), OPTIONS)
    assert output.result.finished
    assert output.checkpoint.name == CHECKPOINT_FILE
    assert sorted(output.bev) == ["elevation", "grid", "rgb", "semantic"]
    assert all(path.is_file() for path in output.bev.values())

    manifest = json.loads((tmp_path / "run" / RUN_MANIFEST_FILE).read_text())
    assert manifest["command"] == "reconstruct"
    assert manifest["seed"] == 0
    assert any(key.startswith("scene/poses.txt") for key in manifest["input_hashes"])

    maps = read_bev_maps(tmp_path / "run" / "bev")
    gt = load_ground_truth(scene_dir, 7)
    assert maps.grid == gt.grid

    restored = checkpoint_load(output.checkpoint)
    assert restored.state.step == 6
    assert np.array_equal(restored.scene.z, output.result.scene.z)


def test_metrics_log_has_one_line_per_step_and_epoch(scene_dir, tmp_path):
    output = cmd_reconstruct(scene_dir, tmp_path / "run", TrainConfig(epochs=2), OPTIONS)
    lines = [json.loads(line) for line in output.metrics.read_text().splitlines()]
    assert [line["type"] for line in lines].count("step") == 12
    epochs = [line for line in lines if line["type"] == "epoch"]
    assert [e["epoch"] for e in epochs] == [0, 1]
    assert epochs[0]["psnr"] is not None
    assert {"L_c", "L_s", "L_smooth", "L_z", "lr_z"} <= set(lines[0])


def test_lidar_without_clouds_names_the_folder(scene_dir, tmp_path):
    shutil.rmtree(scene_dir / CLOUDS_DIR)
    with pytest.raises(SceneDirectoryError) as info:
        cmd_reconstruct(scene_dir, tmp_path / "run", TrainConfig(use_lidar=True), OPTIONS)
    assert info.value.details["missing"].endswith(CLOUDS_DIR)


def test_stopped_run_resumes_from_its_checkpoint(scene_dir, tmp_path):
    cfg = TrainConfig(epochs=2)
    full = cmd_reconstruct(scene_dir, tmp_path / "full", cfg, OPTIONS)
    partial = cmd_reconstruct(scene_dir, tmp_path / "part", cfg, OPTIONS.model_copy(update={"stop_at_step": 5}))
    assert not partial.result.finished and partial.bev == {}
    resumed = cmd_reconstruct(scene_dir, tmp_path / "resumed", cfg, OPTIONS, resume=partial.checkpoint)
    assert np.array_equal(resumed.result.scene.z, full.result.scene.z)
    assert np.array_equal(resumed.result.state.exposure, full.result.state.exposure)
    assert resumed.result.state.step == full.result.state.step == 12
    assert [e.mean_total for e in resumed.result.epochs] == [e.mean_total for e in full.result.epochs]


def test_ground_truth_scores_perfectly_against_itself(scene_dir):
    gt_dir = scene_dir / ANALYTIC_GT_DIR
    report = cmd_evaluate([], gt_dir, maps=[gt_dir])
    row = report.rows[0]
    assert row.psnr == 99.0
    assert row.miou == 1.0
    assert row.elevation_rmse == pytest.approx(0.0, abs=1e-6)
    assert row.coverage == 1.0


def test_evaluate_sorts_rows_and_writes_a_report(scene_dir, tmp_path):
    for name in ("run_b", "run_a"):
        cmd_reconstruct(scene_dir, tmp_path / name, TrainConfig(epochs=1), OPTIONS)
    report_path = tmp_path / "report.json"
    report = cmd_evaluate(
        [tmp_path / "run_b" / CHECKPOINT_FILE, tmp_path / "run_a" / CHECKPOINT_FILE], scene_dir, report_path
    )
    assert [row.scene for row in report.rows] == ["run_a", "run_b"]
    assert report.mean.scene == "mean"
    assert all(0.0 <= row.miou <= 1.0 and row.coverage > 0.0 for row in report.rows)
    assert json.loads(report_path.read_text())["mean"]["scene"] == "mean"
    table = format_report(report)
    assert table.splitlines()[1].startswith("run_a")


def test_evaluate_needs_inputs(scene_dir, tmp_path):
    with pytest.raises(MissingGT):
        cmd_evaluate([], scene_dir)
    with pytest.raises(MissingGT):
        load_ground_truth(tmp_path)


def test_evaluate_builds_ground_truth_from_clouds(scene_dir, tmp_path):
    output = cmd_reconstruct(scene_dir, tmp_path / "run", TrainConfig(epochs=1), OPTIONS)
    shutil.rmtree(scene_dir / ANALYTIC_GT_DIR)
    report = cmd_evaluate([output.checkpoint], scene_dir)
    row = report.rows[0]
    assert row.scene == "run"
    assert np.isfinite(row.psnr)
    assert 0.0 <= row.miou <= 1.0
    assert row.elevation_rmse is not None
    assert row.coverage > 0.0


def test_reconstruct_can_skip_the_initialization_passes(scene_dir, tmp_path):
    options = OPTIONS.model_copy(update={"init_appearance": False, "seed_from_lidar": False})
    plain = cmd_reconstruct(scene_dir, tmp_path / "plain", TrainConfig(epochs=1, lr_exposure=0.0), options)
    assert np.all(plain.result.state.exposure == 0.0)
    assert plain.result.scene.semantics.max() < 1.0
    fitted = cmd_reconstruct(scene_dir, tmp_path / "fitted", TrainConfig(epochs=1, lr_exposure=0.0), OPTIONS)
    assert np.all(fitted.result.state.exposure[0] == 0.0)
    # observed classes start from a confident logit
    assert fitted.result.scene.semantics.max() > 2.0


def test_train_config_file_and_overrides(tmp_path):
    path = tmp_path / "train.json"
    path.write_text(json.dumps({"epochs": 3, "lr_color": 0.01}))
    cfg = load_train_config(path, {"epochs": 5, "seed": None})
    assert cfg.epochs == 5 and cfg.lr_color == 0.01 and cfg.seed == 0

    path.write_text(json.dumps({"epochs": -1}))
    with pytest.raises(InputError) as info:
        load_train_config(path, {})
    assert "epochs" in info.value.details["fields"]


def test_main_exit_codes(spec_file, tmp_path, monkeypatch, capsys):
    scene = tmp_path / "cli_scene"
    assert main.main(["synth", str(spec_file), str(scene), "--threads", "1"]) == 0
    assert "scene:" in capsys.readouterr().out

    assert main.main(["reconstruct", str(tmp_path / "missing"), str(tmp_path / "out")]) == 1
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["code"] == "scene_directory"

    def diverge(*args, **kwargs):
        raise DivergedScene("heights left the plausible range")

    monkeypatch.setattr(reconstruct_cli, "cmd_reconstruct", diverge)
    assert main.main(["reconstruct", str(scene), str(tmp_path / "out")]) == 2


def test_main_runs_reconstruct_and_evaluate(scene_dir, tmp_path, capsys):
    out = tmp_path / "cli_run"
    argv = ["reconstruct", str(scene_dir), str(out), "--resolution", "0.25", "--expand", "3"]
    assert main.main(argv + ["--epochs", "1", "--threads", "1", "--seed", "2"]) == 0
    assert (out / METRICS_FILE).is_file()
    assert checkpoint_load(out / CHECKPOINT_FILE).config.seed == 2
    capsys.readouterr()

    assert main.main(["evaluate", str(out / CHECKPOINT_FILE), "--gt", str(scene_dir)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[1].startswith("cli_run") and lines[2].startswith("mean")
