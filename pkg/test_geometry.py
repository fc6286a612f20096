import math

import numpy as np
import pytest

from roadsplat.core.exceptions import BehindCamera, InvalidPose
from roadsplat.engine.geometry import (
    CameraModel,
    LabeledImage,
    PointCloud,
    Pose,
    bev_camera,
    camera_to_world,
    matrix_to_quaternion,
    project_orthographic,
    project_perspective,
    quaternion_to_matrix,
    world_to_camera,
    world_to_camera_matrix,
)
from roadsplat.models import CameraKind


def random_pose(rng):
    q = rng.normal(size=4)
    return Pose.from_quaternion(q / np.linalg.norm(q), rng.normal(scale=10.0, size=3))


def pinhole(**overrides):
    params = dict(camera_id="c", width=100, height=100, cx=50.0, cy=50.0, fx=100.0, fy=100.0)
    params.update(overrides)
    return CameraModel(**params)


def ortho(scale=0.05, center=1000.0):
    return CameraModel(
        camera_id="o", width=2000, height=2000, cx=center, cy=center,
        kind=CameraKind.ORTHOGRAPHIC, ortho_scale=scale,
    )


def test_identity_transform():
    cam = pinhole()
    assert np.allclose(world_to_camera(Pose(), cam, np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])


def test_translation_cancels():
    pose = Pose(np.eye(3), np.array([5.0, 0.0, 0.0]))
    assert np.allclose(world_to_camera(pose, pinhole(), np.array([5.0, 0.0, 0.0])), 0.0)


def test_world_to_camera_matches_homogeneous_matrix(rng):
    for _ in range(20):
        vehicle = random_pose(rng)
        cam = pinhole(extrinsic=random_pose(rng))
        p = rng.normal(scale=5.0, size=3)
        w = world_to_camera_matrix(vehicle, cam)
        oracle = np.linalg.inv(vehicle.matrix() @ cam.extrinsic.matrix()) @ np.append(p, 1.0)
        assert np.allclose(w @ np.append(p, 1.0), oracle, atol=1e-9)
        assert np.allclose(world_to_camera(vehicle, cam, p), oracle[:3], atol=1e-9)


def test_camera_round_trip(rng):
    for _ in range(1000 // 50):
        vehicle = random_pose(rng)
        cam = pinhole(extrinsic=random_pose(rng))
        points = rng.normal(scale=20.0, size=(50, 3))
        back = camera_to_world(vehicle, cam, world_to_camera(vehicle, cam, points))
        assert np.max(np.abs(back - points)) < 1e-9


def test_project_perspective_examples():
    cam = pinhole()
    u, v, depth, jac = project_perspective(cam, np.array([0.0, 0.0, 1.0]))
    assert (u, v, depth) == (50.0, 50.0, 1.0)
    assert np.allclose(jac, [[100.0, 0.0, 0.0], [0.0, 100.0, 0.0]])
    u, v, _, _ = project_perspective(cam, np.array([0.1, 0.0, 1.0]))
    assert math.isclose(u, 60.0) and v == 50.0


def test_perspective_jacobian_matches_finite_differences(rng):
    cam = pinhole(fx=80.0, fy=120.0)
    step = 1e-6
    for _ in range(100):
        p = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(1, 10)])
        _, _, _, jac = project_perspective(cam, p)
        numeric = np.zeros((2, 3))
        for k in range(3):
            dp = np.zeros(3)
            dp[k] = step
            up, vp, _, _ = project_perspective(cam, p + dp)
            um, vm, _, _ = project_perspective(cam, p - dp)
            numeric[:, k] = [(up - um) / (2 * step), (vp - vm) / (2 * step)]
        scale = np.maximum(np.abs(numeric), 1.0)
        assert np.max(np.abs(numeric - jac) / scale) < 1e-4


def test_project_behind_camera_raises():
    with pytest.raises(BehindCamera):
        project_perspective(pinhole(), np.array([0.0, 0.0, 0.05]))


def test_project_orthographic_examples():
    cam = ortho()
    u, v, _ = project_orthographic(cam, np.array([0.0, 0.0, -10.0]))
    assert (u, v) == (1000.0, 1000.0)
    u, _, _ = project_orthographic(cam, np.array([1.0, 0.0, -10.0]))
    assert math.isclose(u, 1020.0)
    _, _, near = project_orthographic(cam, np.array([0.0, 0.0, -1.0]))
    _, _, far = project_orthographic(cam, np.array([0.0, 0.0, -2.0]))
    assert near < far


def test_project_orthographic_is_affine(rng):
    cam = ortho(scale=0.1, center=3.0)
    p, q = rng.normal(size=3), rng.normal(size=3)
    a, b = 0.3, 0.7
    lhs = np.array(project_orthographic(cam, a * p + b * q)[:2])
    rhs = a * np.array(project_orthographic(cam, p)[:2]) + b * np.array(project_orthographic(cam, q)[:2])
    # the principal point enters with weight (a + b) on the right
    assert np.allclose(lhs, rhs + (1.0 - a - b) * np.array([cam.cx, cam.cy]))


def test_bev_camera_maps_pixel_centers():
    pose, cam = bev_camera(10.0, -5.0, 0.5, 40, 20)
    p_cam = world_to_camera(pose, cam, np.array([10.0 + 3 * 0.5, -5.0 + 7 * 0.5, 0.0]))
    u, v, depth = project_orthographic(cam, p_cam)
    assert np.allclose([u, v], [3.0, 7.0])
    assert depth > 0


def test_invalid_rotation_rejected():
    with pytest.raises(InvalidPose):
        Pose(np.diag([1.0, 1.0, 2.0]), np.zeros(3))
    with pytest.raises(InvalidPose):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_quaternion_round_trip(rng):
    q = rng.normal(size=(50, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1
    assert np.allclose(matrix_to_quaternion(quaternion_to_matrix(q)), q, atol=1e-12)


def test_pose_inverse_and_compose(rng):
    pose = random_pose(rng)
    identity = pose.compose(pose.inverse())
    assert np.allclose(identity.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(identity.translation, 0.0, atol=1e-9)


def test_camera_invariants():
    with pytest.raises(ValueError):
        pinhole(fx=0.0)
    with pytest.raises(ValueError):
        CameraModel(camera_id="o", width=4, height=4, cx=0, cy=0, kind=CameraKind.ORTHOGRAPHIC)
    cam = pinhole()
    assert (cam.exposure_a, cam.exposure_b) == (0.0, 0.0)
    assert CameraModel.from_record(cam.to_record()).to_record() == cam.to_record()


def test_labeled_image_mask_from_whitelist():
    labels = np.array([[0, 1], [5, 6]])
    image = LabeledImage.from_labels(np.zeros((2, 2, 3)), labels, [0, 1, 2], "c", "f")
    assert image.mask.tolist() == [[True, True], [False, False]]
    with pytest.raises(ValueError):
        LabeledImage(np.zeros((2, 2, 3)), np.zeros((3, 2)), np.zeros((2, 2)), "c", "f")


def test_point_cloud_shapes():
    cloud = PointCloud(np.zeros((4, 3)), colors=np.ones((4, 3)), labels=np.arange(4))
    assert len(cloud) == 4
    with pytest.raises(ValueError):
        PointCloud(np.zeros((4, 3)), labels=np.arange(3))
    moved = cloud.transformed(Pose(np.eye(3), np.array([1.0, 2.0, 3.0])))
    assert np.allclose(moved.points, [1.0, 2.0, 3.0])
