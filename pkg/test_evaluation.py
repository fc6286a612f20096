import math

import numpy as np
import pytest

from conftest import make_down_camera
from roadsplat.core.exceptions import EmptyMask, MissingGT, NoAssociation, NoMatches
from roadsplat.engine.evaluation import (
    CloudFrame,
    GroundTruthBev,
    associate,
    build_gt,
    colorize_points,
    confusion_matrix,
    coverage,
    elevation_rmse,
    evaluate_maps,
    make_report,
    miou,
    psnr,
    rasterize_points,
)
from roadsplat.engine.geometry import Frame, LabeledImage, PointCloud, Pose
from roadsplat.engine.rasterizer import BevMaps
from roadsplat.engine.scene import BevGrid
from roadsplat.models import EvaluationRow

# ground points landing on pixel (16, 16) and pixel (row 16, col 10) of the down camera
CENTER_POINT = (0.15625, -0.15625, 0.0)
LEFT_POINT = (-1.71875, -0.15625, 0.0)


def image_frame(rgb, labels=None, camera_id="cam0", timestamp=0.0):
    labels = np.zeros(rgb.shape[:2], dtype=np.int64) if labels is None else labels
    mask = np.ones(rgb.shape[:2], dtype=bool)
    pose = Pose(np.eye(3), np.zeros(3), timestamp=timestamp)
    return Frame(LabeledImage(rgb, labels, mask, camera_id, "000000"), pose)


def flat_gt(grid, z=0.0, class_count=3):
    xs, ys = grid.pixel_centers()
    return GroundTruthBev(
        grid=grid,
        rgb=np.full(grid.shape + (3,), 0.5),
        labels=np.zeros(grid.shape, dtype=np.uint8),
        valid_mask=np.ones(grid.shape, dtype=bool),
        elevation=np.column_stack([xs.ravel(), ys.ravel(), np.full(xs.size, z)]),
        class_count=class_count,
    )


def test_psnr_examples(rng):
    gt = rng.uniform(0.2, 0.8, size=(8, 8, 3))
    mask = np.ones((8, 8), dtype=bool)
    assert psnr(gt, gt, mask) == 99.0
    assert math.isclose(psnr(gt + 0.1, gt, mask), 20.0, rel_tol=1e-9)
    checker = np.indices((8, 8)).sum(axis=0) % 2
    board = np.repeat(checker[..., None], 3, axis=2).astype(np.float64)
    assert math.isclose(psnr(board, np.zeros_like(board), mask), 10 * math.log10(2.0), rel_tol=1e-12)
    assert abs(psnr(board, np.zeros_like(board), mask) - 3.01) < 0.01


def test_psnr_is_symmetric_and_masked(rng):
    a, b = rng.uniform(size=(6, 6, 3)), rng.uniform(size=(6, 6, 3))
    mask = rng.uniform(size=(6, 6)) > 0.5
    mask[0, 0] = True
    assert psnr(a, b, mask) == psnr(b, a, mask)
    changed = a.copy()
    changed[~mask] = 0.0
    assert psnr(changed, b, mask) == psnr(a, b, mask)
    with pytest.raises(EmptyMask):
        psnr(a, b, np.zeros((6, 6), dtype=bool))


def test_miou_examples():
    gt = np.array([[0, 0], [1, 1]])
    mask = np.ones((2, 2), dtype=bool)
    assert miou(gt, gt, mask, 2) == 1.0
    assert miou(1 - gt, gt, mask, 2) == 0.0


def test_miou_matches_confusion_oracle(rng):
    pred = rng.integers(0, 3, size=(10, 12))
    gt = rng.integers(0, 3, size=(10, 12))
    mask = rng.uniform(size=(10, 12)) > 0.2
    ious = []
    for c in range(3):
        p, g = pred[mask] == c, gt[mask] == c
        if g.any():
            ious.append((p & g).sum() / (p | g).sum())
    assert math.isclose(miou(pred, gt, mask, 3), float(np.mean(ious)), rel_tol=1e-12)
    assert math.isclose(miou(pred, gt, mask, 3), miou(gt, pred, mask, 3), rel_tol=1e-12)


def test_miou_counts_void_predictions_as_misses():
    gt = np.array([[0, 0, 1, 1]])
    pred = np.array([[0, 255, 1, 1]])
    assert math.isclose(miou(pred, gt, np.ones((1, 4), dtype=bool), 2), (0.5 + 1.0) / 2)


def test_confusion_matrix_layout():
    conf = confusion_matrix(np.array([0, 1, 1, 255]), np.array([0, 0, 1, 1]), 2)
    assert conf.shape == (3, 3)
    assert conf[0].tolist() == [1, 1, 0]
    assert conf[1].tolist() == [0, 1, 1]


def test_elevation_rmse_recovers_a_constant_shift(rng, random_scene):
    scene = random_scene(rng, count=40)
    gt = GroundTruthBev(
        grid=BevGrid(-3.0, -3.0, 0.5, 13, 13),
        rgb=np.zeros((13, 13, 3)),
        labels=np.zeros((13, 13), dtype=np.uint8),
        valid_mask=np.ones((13, 13), dtype=bool),
        elevation=scene.centers(),
        class_count=3,
    )
    assert elevation_rmse(scene, gt).rmse == 0.0
    shifted = scene.copy()
    shifted.z += 0.1
    error = elevation_rmse(shifted, gt)
    assert math.isclose(error.rmse, 0.1, rel_tol=1e-9)
    assert error.matched_fraction == 1.0


def test_elevation_rmse_without_matches(mask_scene):
    scene = mask_scene(np.ones((2, 2), dtype=bool))
    gt = flat_gt(BevGrid(100.0, 100.0, 1.0, 3, 3))
    with pytest.raises(NoMatches):
        elevation_rmse(scene, gt)


def test_colorize_single_and_mean(down_camera):
    rgb = np.zeros((32, 32, 3))
    rgb[16, 16] = (0.2, 0.4, 0.6)
    points = np.array([CENTER_POINT])
    colors, labels, observed = colorize_points(points, [(image_frame(rgb), down_camera)], 3)
    assert np.allclose(colors[0], [0.2, 0.4, 0.6])
    assert labels[0] == 0 and observed[0]

    other = make_down_camera("cam1")
    views = [
        (image_frame(np.zeros((32, 32, 3))), down_camera),
        (image_frame(np.ones((32, 32, 3)), camera_id="cam1"), other),
    ]
    colors, _, _ = colorize_points(points, views, 3)
    assert np.allclose(colors[0], 0.5)


def test_colorize_mode_tie_goes_to_lowest_class(down_camera):
    other = make_down_camera("cam1")
    views = [
        (image_frame(np.zeros((32, 32, 3)), np.full((32, 32), 2)), down_camera),
        (image_frame(np.zeros((32, 32, 3)), np.full((32, 32), 1), camera_id="cam1"), other),
    ]
    _, labels, _ = colorize_points(np.array([CENTER_POINT]), views, 3)
    assert labels[0] == 1


def test_unseen_points_are_not_observed(down_camera):
    _, labels, observed = colorize_points(
        np.array([[100.0, 0.0, 0.0]]), [(image_frame(np.zeros((32, 32, 3))), down_camera)], 3
    )
    assert not observed[0]
    assert labels[0] == 255


def test_rasterize_points_mean_and_mode():
    grid = BevGrid(0.0, 0.0, 1.0, 2, 2)
    points = np.array([[0.1, 0.0, 0.0], [-0.1, 0.1, 0.0], [1.0, 1.0, 0.0], [1.1, 0.9, 0.0]])
    colors = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.3, 0.3, 0.3], [0.3, 0.3, 0.3]])
    labels = np.array([2, 2, 3, 1])
    rgb, label_map, valid = rasterize_points(points, colors, labels, grid, 4)
    assert np.allclose(rgb[0, 0], 0.5)
    assert label_map[0, 0] == 2
    assert label_map[1, 1] == 1
    assert valid.tolist() == [[True, False], [False, True]]
    assert label_map[0, 1] == 255


def test_associate():
    times = np.array([0.0, 0.5, 1.0])
    assert associate(0.52, times, 0.1) == 1
    with pytest.raises(NoAssociation):
        associate(0.75, times, 0.1)
    with pytest.raises(NoAssociation):
        associate(None, times, 0.1)


def test_build_gt_drops_non_road_points(down_camera):
    rgb = np.zeros((32, 32, 3))
    rgb[16, 16] = (0.2, 0.4, 0.6)
    labels = np.zeros((32, 32), dtype=np.int64)
    labels[16, 10] = 6
    frame = image_frame(rgb, labels)
    sweep = CloudFrame(PointCloud(np.array([CENTER_POINT, LEFT_POINT])), Pose(np.eye(3), np.zeros(3), timestamp=0.02))
    grid = BevGrid(-2.0, -1.0, 0.5, 9, 5)
    gt = build_gt([sweep], [frame], {"cam0": down_camera}, [0, 1, 2, 3, 4], 7, grid=grid)
    assert len(gt.elevation) == 1
    assert np.allclose(gt.elevation[0], CENTER_POINT)
    assert gt.valid_mask.sum() == 1
    row, col = np.argwhere(gt.valid_mask)[0]
    assert np.allclose(gt.rgb[row, col], [0.2, 0.4, 0.6])
    assert gt.labels[row, col] == 0

    again = build_gt([sweep], [frame], {"cam0": down_camera}, [0, 1, 2, 3, 4], 7, grid=grid)
    assert np.array_equal(again.labels, gt.labels)


def test_build_gt_needs_clouds(down_camera):
    with pytest.raises(MissingGT):
        build_gt([], [image_frame(np.zeros((32, 32, 3)))], {"cam0": down_camera}, [0], 7)


def test_coverage():
    alpha = np.array([[0.9, 0.2], [0.6, 0.0]])
    valid = np.array([[True, True], [True, False]])
    assert math.isclose(coverage(alpha, valid), 2.0 / 3.0)
    assert coverage(alpha, np.zeros((2, 2), dtype=bool)) == 0.0


def test_self_evaluation_is_perfect():
    grid = BevGrid(0.0, 0.0, 1.0, 4, 3)
    gt = flat_gt(grid, z=0.3)
    maps = BevMaps(
        rgb=gt.rgb.copy(),
        labels=gt.labels.copy(),
        elevation=np.full(grid.shape, 0.3),
        alpha=np.ones(grid.shape),
        grid=grid,
    )
    row = evaluate_maps("self", maps, gt)
    assert row.psnr == 99.0
    assert row.miou == 1.0
    assert row.elevation_rmse == 0.0
    assert row.coverage == 1.0


def test_report_rows_sorted_with_mean():
    rows = [
        EvaluationRow(scene="b", psnr=20.0, miou=0.5, elevation_rmse=0.2),
        EvaluationRow(scene="a", psnr=30.0, miou=0.7, elevation_rmse=None),
    ]
    report = make_report(rows)
    assert [r.scene for r in report.rows] == ["a", "b"]
    assert report.mean.scene == "mean"
    assert report.mean.psnr == 25.0
    assert math.isclose(report.mean.miou, 0.6)
    assert report.mean.elevation_rmse == 0.2
