import math

import numpy as np
import pytest

from roadsplat.core.exceptions import EmptyMask, NonFiniteLoss
from roadsplat.engine.geometry import LabeledImage, PointCloud
from roadsplat.engine.losses import (
    LossParts,
    color_loss,
    elevation_loss,
    match_cloud,
    semantic_loss,
    smooth_loss,
    total_loss,
)
from roadsplat.engine.scene import neighbor_table
from roadsplat.models import LossWeights


def target(rgb, labels=None, mask=None):
    h, w = rgb.shape[:2]
    labels = np.zeros((h, w), dtype=np.int64) if labels is None else labels
    mask = np.ones((h, w), dtype=bool) if mask is None else mask
    return LabeledImage(rgb, labels, mask, "cam0", "000000")


def test_color_loss_examples():
    rgb = np.ones((4, 5, 3))
    assert color_loss(rgb.copy(), target(rgb))[0] == 0.0
    loss, grad = color_loss(np.zeros((4, 5, 3)), target(rgb))
    assert loss == 1.0
    assert np.allclose(grad, -1.0 / 60.0)


def test_color_loss_matches_scalar_reference(rng):
    render = rng.uniform(size=(6, 7, 3))
    rgb = rng.uniform(size=(6, 7, 3))
    mask = np.zeros((6, 7), dtype=bool)
    mask[:3] = True
    total, count = 0.0, 0
    for r in range(6):
        for c in range(7):
            if mask[r, c]:
                count += 1
                for k in range(3):
                    total += abs(render[r, c, k] - rgb[r, c, k])
    loss, _ = color_loss(render, target(rgb, mask=mask))
    assert math.isclose(loss, total / (count * 3), rel_tol=1e-12)


def test_color_gradient_matches_finite_differences(rng):
    render = rng.uniform(size=(3, 4, 3))
    t = target(rng.uniform(size=(3, 4, 3)), mask=rng.uniform(size=(3, 4)) > 0.3)
    _, grad = color_loss(render, t)
    eps = 1e-7
    for index in np.ndindex(render.shape):
        plus, minus = render.copy(), render.copy()
        plus[index] += eps
        minus[index] -= eps
        numeric = (color_loss(plus, t)[0] - color_loss(minus, t)[0]) / (2 * eps)
        assert abs(numeric - grad[index]) < 1e-6


def test_losses_ignore_masked_out_pixels(rng):
    render_rgb = rng.uniform(size=(5, 5, 3))
    logits = rng.normal(size=(5, 5, 4))
    mask = rng.uniform(size=(5, 5)) > 0.5
    mask[0, 0] = True
    t = target(rng.uniform(size=(5, 5, 3)), rng.integers(0, 4, size=(5, 5)), mask)
    changed_rgb, changed_logits = render_rgb.copy(), logits.copy()
    changed_rgb[~mask] += 10.0
    changed_logits[~mask] = rng.normal(size=(int((~mask).sum()), 4))
    assert color_loss(render_rgb, t)[0] == color_loss(changed_rgb, t)[0]
    assert semantic_loss(logits, t)[0] == semantic_loss(changed_logits, t)[0]


def test_semantic_loss_examples():
    labels = np.array([[0, 1], [2, 3]])
    t = target(np.zeros((2, 2, 3)), labels)
    assert math.isclose(semantic_loss(np.zeros((2, 2, 4)), t)[0], math.log(4.0), rel_tol=1e-12)
    perfect = np.where(np.eye(4, dtype=bool)[labels], 50.0, -50.0)
    assert semantic_loss(perfect, t)[0] < 1e-6


def test_semantic_loss_matches_scalar_reference(rng):
    logits = rng.normal(scale=3.0, size=(4, 6, 5))
    labels = rng.integers(0, 5, size=(4, 6))
    mask = rng.uniform(size=(4, 6)) > 0.4
    mask[0, 0] = True
    total = 0.0
    for r, c in zip(*np.nonzero(mask)):
        z = logits[r, c]
        total += -(z[labels[r, c]] - math.log(sum(math.exp(v) for v in z)))
    loss, _ = semantic_loss(logits, target(np.zeros((4, 6, 3)), labels, mask))
    assert math.isclose(loss, total / mask.sum(), rel_tol=1e-10)


def test_semantic_gradient_matches_finite_differences(rng):
    logits = rng.normal(size=(3, 3, 4))
    t = target(np.zeros((3, 3, 3)), rng.integers(0, 4, size=(3, 3)))
    _, grad = semantic_loss(logits, t)
    eps = 1e-6
    for index in np.ndindex(logits.shape):
        plus, minus = logits.copy(), logits.copy()
        plus[index] += eps
        minus[index] -= eps
        numeric = (semantic_loss(plus, t)[0] - semantic_loss(minus, t)[0]) / (2 * eps)
        assert abs(numeric - grad[index]) < 1e-7


def test_empty_mask_rejected():
    t = target(np.zeros((2, 2, 3)), mask=np.zeros((2, 2), dtype=bool))
    with pytest.raises(EmptyMask):
        color_loss(np.zeros((2, 2, 3)), t)
    with pytest.raises(EmptyMask):
        semantic_loss(np.zeros((2, 2, 3)), t)


def test_smooth_loss_examples(mask_scene):
    flat = mask_scene(np.ones((3, 3), dtype=bool))
    flat.z[:] = 2.5
    assert smooth_loss(flat, neighbor_table(flat))[0] == 0.0

    pair = mask_scene(np.ones((1, 2), dtype=bool))
    pair.z[:] = (0.0, 1.0)
    loss, grad = smooth_loss(pair, neighbor_table(pair))
    assert loss == 0.5
    assert np.allclose(grad, [-1.0, 1.0])


def test_smooth_loss_matches_brute_force(rng, mask_scene):
    scene = mask_scene(rng.uniform(size=(20, 20)) > 0.2)
    scene.z = rng.normal(size=scene.surfel_count)
    loss, _ = smooth_loss(scene, neighbor_table(scene))
    # true nearest surfel one lattice step away in each axis direction
    total = 0.0
    for i, (x, y) in enumerate(scene.xy):
        for dx, dy in ((0.0, 1.0), (0.0, -1.0), (-1.0, 0.0), (1.0, 0.0)):
            dist = np.hypot(scene.xy[:, 0] - x - dx, scene.xy[:, 1] - y - dy)
            j = int(np.argmin(dist))
            if dist[j] < 1e-9:
                total += (scene.z[i] - scene.z[j]) ** 2
    assert math.isclose(loss, total / 4.0, rel_tol=1e-12)


def test_smooth_loss_translation_invariant(rng, mask_scene):
    scene = mask_scene(rng.uniform(size=(8, 8)) > 0.3)
    scene.z = rng.normal(size=scene.surfel_count)
    neighbors = neighbor_table(scene)
    loss, grad = smooth_loss(scene, neighbors)
    shifted = scene.copy()
    shifted.z += 3.7
    assert math.isclose(smooth_loss(shifted, neighbors)[0], loss, rel_tol=1e-9)
    assert abs(grad.sum()) < 1e-9

    eps = 1e-6
    for i in rng.choice(scene.surfel_count, size=5, replace=False):
        plus, minus = scene.copy(), scene.copy()
        plus.z[i] += eps
        minus.z[i] -= eps
        numeric = (smooth_loss(plus, neighbors)[0] - smooth_loss(minus, neighbors)[0]) / (2 * eps)
        assert abs(numeric - grad[i]) < 1e-6


def test_elevation_loss_examples(mask_scene):
    scene = mask_scene(np.ones((1, 1), dtype=bool))
    cloud = PointCloud(np.array([[0.0, 0.0, 0.5]]))
    loss, grad = elevation_loss(scene, cloud)
    assert loss == 0.25
    assert np.allclose(grad, [-1.0])

    agree = mask_scene(np.ones((2, 3), dtype=bool))
    agree.z = np.arange(6, dtype=np.float64)
    assert elevation_loss(agree, PointCloud(np.column_stack([agree.xy, agree.z])))[0] == 0.0


def test_elevation_unmatched_surfels_contribute_nothing(mask_scene):
    scene = mask_scene(np.ones((1, 3), dtype=bool))
    cloud = PointCloud(np.array([[0.05, 0.0, 1.0]]))
    loss, grad = elevation_loss(scene, cloud, radius=0.1)
    assert loss == 1.0
    assert grad.tolist() == [-2.0, 0.0, 0.0]
    far = PointCloud(np.array([[50.0, 50.0, 1.0]]))
    assert elevation_loss(scene, far)[0] == 0.0


def test_elevation_loss_reductions(mask_scene):
    scene = mask_scene(np.ones((1, 4), dtype=bool))
    cloud = PointCloud(np.column_stack([scene.xy, [1.0, 2.0, 0.0, 1.0]]))
    summed, d_sum = elevation_loss(scene, cloud)
    mean, d_mean = elevation_loss(scene, cloud, reduction="mean")
    assert summed == 6.0
    assert mean == 1.5
    assert np.allclose(d_sum, 4.0 * d_mean)
    assert d_sum.tolist() == [-2.0, -4.0, 0.0, -2.0]
    with pytest.raises(ValueError):
        elevation_loss(scene, cloud, reduction="median")


def test_match_cloud_matches_brute_force(rng):
    xy = rng.uniform(0.0, 5.0, size=(300, 2))
    points = np.column_stack([rng.uniform(0.0, 5.0, size=(400, 2)), rng.normal(size=400)])
    radius = 0.15
    match = match_cloud(xy, PointCloud(points), radius)
    expected_surfels, expected_z = [], []
    for i, q in enumerate(xy):
        dist = np.hypot(points[:, 0] - q[0], points[:, 1] - q[1])
        j = int(np.argmin(dist))
        if dist[j] < radius:
            expected_surfels.append(i)
            expected_z.append(points[j, 2])
    assert match.surfels.tolist() == expected_surfels
    assert np.allclose(match.target_z, expected_z)


def test_total_loss_examples():
    weights = LossWeights()
    assert math.isclose(total_loss(LossParts(1.0, 1.0, 1.0, 1.0), weights, use_lidar=True), 2.08)
    assert math.isclose(total_loss(LossParts(1.0, 1.0, 1.0, 0.0), weights), 1.063)
    assert total_loss(LossParts(), weights) == 0.0


def test_total_loss_rejects_non_finite():
    with pytest.raises(NonFiniteLoss) as info:
        total_loss(LossParts(1.0, float("nan"), 0.0, 0.0), LossWeights(), step=12)
    assert info.value.component == "L_s"
    assert info.value.step == 12
