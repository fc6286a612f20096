import shutil
import struct

import numpy as np
import pytest

from conftest import make_down_camera
from roadsplat.core.exceptions import CorruptCheckpoint, InvalidPose, MissingGT, SceneDirectoryError
from roadsplat.engine.geometry import Pose
from roadsplat.engine.rasterizer import BevMaps
from roadsplat.engine.scene import PARAMETER_CLASSES, BevGrid
from roadsplat.engine.synth import generate
from roadsplat.engine.trainer import TrainState
from roadsplat.models import EpochSnapshot, Layout, TrainConfig
from roadsplat.storage.bev_export import (
    ELEVATION_POINTS_FILE,
    read_bev_maps,
    read_ground_truth,
    write_bev_maps,
    write_ground_truth,
)
from roadsplat.storage.checkpoint import checkpoint_load, checkpoint_save
from roadsplat.storage.scene_directory import (
    LABELS_DIR,
    SceneDirectory,
    format_poses,
    parse_poses,
)


@pytest.fixture
def trained_state(rng, random_scene):
    scene = random_scene(rng)
    scene.layout = Layout.TWO
    cameras = {"cam0": make_down_camera("cam0"), "cam1": make_down_camera("cam1").with_exposure(0.1, -0.02)}
    cfg = TrainConfig(seed=3, epochs=2)
    state = TrainState.fresh(scene, cameras, cfg)
    params = dict(scene.parameters(), exposure=state.exposure)
    grads = {name: rng.normal(size=value.shape) for name, value in params.items()}
    state.optimizer.step(params, grads, {name: 1e-3 for name in params})
    state.step = 5
    state.epoch_log.append(EpochSnapshot(epoch=0, steps=4, mean_total=0.25, psnr=21.5))
    return scene, state, cameras, cfg


def test_checkpoint_round_trip_is_byte_identical(tmp_path, trained_state):
    scene, state, cameras, cfg = trained_state
    first = checkpoint_save(tmp_path / "a.rsplat", scene, state, cameras, cfg)
    loaded = checkpoint_load(first)
    second = checkpoint_save(tmp_path / "b.rsplat", loaded.scene, loaded.state, loaded.cameras, loaded.config)
    assert first.read_bytes() == second.read_bytes()

    for name in ("xy", "cells", "lattice", "road_mask", "grid_origin") + PARAMETER_CLASSES:
        assert np.array_equal(getattr(loaded.scene, name), getattr(scene, name)), name
    assert loaded.scene.road_mask.dtype == np.bool_
    assert loaded.scene.layout == Layout.TWO
    assert loaded.state.step == 5
    assert loaded.state.optimizer.t == 1
    assert np.array_equal(loaded.state.exposure, state.exposure)
    assert loaded.state.epoch_log[0].psnr == 21.5
    assert loaded.cameras["cam1"].exposure_a == 0.1
    assert loaded.config == cfg


def test_checkpoint_without_state(tmp_path, rng, random_scene):
    scene = random_scene(rng)
    loaded = checkpoint_load(checkpoint_save(tmp_path / "scene.rsplat", scene))
    assert loaded.state is None and loaded.config is None and loaded.cameras == {}
    assert np.array_equal(loaded.scene.z, scene.z)


def test_corrupt_checkpoints_rejected(tmp_path, trained_state):
    path = checkpoint_save(tmp_path / "ok.rsplat", *trained_state)
    data = path.read_bytes()

    cases = {
        "magic": b"NOTACKPT" + data[8:],
        "version": data[:8] + struct.pack("<I", 99) + data[12:],
        "truncated": data[:-16],
        "short": data[:10],
        "header": data[:20] + b"\xff" * 8 + data[28:],
    }
    for name, payload in cases.items():
        broken = tmp_path / f"{name}.rsplat"
        broken.write_bytes(payload)
        with pytest.raises(CorruptCheckpoint):
            checkpoint_load(broken)
    with pytest.raises(CorruptCheckpoint):
        checkpoint_load(tmp_path / "missing.rsplat")


def test_parse_rotation_and_quaternion_lines():
    text = (
        "# comment\n"
        "000000 0.0 1.0 2.0 3.0 1 0 0 0 1 0 0 0 1\n"
        "\n"
        "000001 0.5 4.0 5.0 6.0 0.7071067811865476 0 0 0.7071067811865476\n"
    )
    poses = parse_poses(text)
    assert list(poses) == ["000000", "000001"]
    assert np.allclose(poses["000000"].translation, [1.0, 2.0, 3.0])
    assert poses["000001"].timestamp == 0.5
    assert np.allclose(poses["000001"].rotation, [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def test_pose_format_round_trip(rng):
    poses = {}
    for k in range(5):
        q = rng.normal(size=4)
        poses[f"{k:06d}"] = Pose.from_quaternion(q / np.linalg.norm(q), rng.normal(size=3), k * 0.1)
    parsed = parse_poses(format_poses(poses))
    for frame_id, pose in poses.items():
        assert np.array_equal(parsed[frame_id].rotation, pose.rotation)
        assert np.array_equal(parsed[frame_id].translation, pose.translation)
        assert parsed[frame_id].timestamp == pose.timestamp


@pytest.mark.parametrize(
    "line, error",
    [
        ("000000 0 0 0 0 1 0 0 0 1 0 0 0", SceneDirectoryError),
        ("000000 0 0 0 zero 1 0 0 0", SceneDirectoryError),
        ("000000 0 0 0 0 1 0 0 0 1 0 0 0 2", InvalidPose),
        ("000000 0 0 0 0 0.5 0 0 0", InvalidPose),
    ],
)
def test_bad_pose_lines(line, error):
    with pytest.raises(error) as info:
        parse_poses("# header\n" + line + "\n", "poses.txt")
    assert info.value.details["line"] == 2
    assert info.value.details["file"] == "poses.txt"


def test_duplicate_frame_ids_rejected():
    line = "000000 0 0 0 0 1 0 0 0\n"
    with pytest.raises(SceneDirectoryError) as info:
        parse_poses(line + line)
    assert info.value.details["frame"] == "000000"


@pytest.fixture
def tiny_dir(tiny_spec, tmp_path):
    return generate(tiny_spec, threads=1).write(tmp_path / "tiny")


def test_scene_directory_round_trip(tiny_dir):
    scene = SceneDirectory.load(tiny_dir)
    assert scene.name == "tiny"
    assert sorted(scene.cameras) == ["cam0", "cam1"]
    assert list(scene.poses) == ["000000", "000001", "000002"]
    assert len(scene.frames) == 6
    assert scene.has_clouds and len(scene.cloud_frames()) == 3
    assert scene.analytic_gt_dir is not None
    frame = scene.frames[0]
    assert frame.image.rgb.shape == (24, 32, 3)
    assert frame.image.mask.dtype == np.bool_

    copy = scene.write(tiny_dir.parent / "copy")
    again = SceneDirectory.load(copy)
    assert [f.image.pose_id for f in again.frames] == [f.image.pose_id for f in scene.frames]
    assert np.array_equal(again.frames[3].image.labels, scene.frames[3].image.labels)
    assert np.array_equal(again.merged_cloud().points, scene.merged_cloud().points)


def test_scene_directory_without_clouds(tiny_dir):
    scene = SceneDirectory.load(tiny_dir, load_clouds=False)
    assert not scene.has_clouds
    assert len(scene.merged_cloud()) == 0


def test_missing_label_folder_named(tiny_dir):
    shutil.rmtree(tiny_dir / LABELS_DIR / "cam1")
    with pytest.raises(SceneDirectoryError) as info:
        SceneDirectory.load(tiny_dir)
    assert info.value.details["path"].endswith("cam1")


def test_unpaired_images_rejected(tiny_dir):
    (tiny_dir / LABELS_DIR / "cam0" / "000001.png").unlink()
    with pytest.raises(SceneDirectoryError) as info:
        SceneDirectory.load(tiny_dir)
    assert info.value.details["unpaired"] == ["000001"]


def test_missing_scene_directory(tmp_path):
    with pytest.raises(SceneDirectoryError):
        SceneDirectory.load(tmp_path / "nowhere")


def test_bev_export_round_trip(tmp_path, rng):
    grid = BevGrid(1.0, -2.0, 0.5, 6, 4)
    labels = rng.integers(0, 5, size=grid.shape).astype(np.uint8)
    labels[0, 0] = 255
    elevation = rng.normal(size=grid.shape)
    elevation[0, 0] = np.nan
    maps = BevMaps(
        rgb=rng.uniform(size=grid.shape + (3,)),
        labels=labels,
        elevation=elevation,
        alpha=np.ones(grid.shape),
        grid=grid,
    )
    palette = [(128, 64, 128), (255, 255, 255), (200, 200, 0), (255, 0, 0), (100, 100, 100)]
    paths = write_bev_maps(tmp_path / "bev", maps, palette)
    assert sorted(paths) == ["elevation", "grid", "rgb", "semantic"]

    back = read_bev_maps(tmp_path / "bev")
    assert back.grid == grid
    assert np.array_equal(back.labels, labels)
    assert np.max(np.abs(back.rgb - maps.rgb)) <= 0.5 / 255 + 1e-12
    assert np.allclose(back.elevation, elevation.astype(np.float32), equal_nan=True)
    assert back.alpha[0, 0] == 0.0 and back.alpha[1, 1] == 1.0


def test_ground_truth_round_trip(tmp_path, tiny_spec):
    scene = generate(tiny_spec, threads=1)
    out = write_ground_truth(tmp_path / "gt", scene.gt, scene.gt_elevation)
    gt = read_ground_truth(out, class_count=7)
    assert gt.grid == scene.gt.grid
    assert np.array_equal(gt.valid_mask, scene.gt.valid_mask)
    assert np.array_equal(gt.labels, scene.gt.labels)
    assert np.array_equal(gt.elevation, scene.gt.elevation)

    (out / ELEVATION_POINTS_FILE).unlink()
    with pytest.raises(MissingGT):
        read_ground_truth(out, class_count=7)
