"""
Shared fixtures: small surfel scenes, a downward-looking camera and a tiny
synthetic scene spec
"""

import numpy as np
import pytest

from roadsplat.engine.geometry import CameraModel, Pose
from roadsplat.engine.scene import EMPTY, SurfelScene
from roadsplat.models import CameraRigSpec, LidarSpec, SyntheticSpec, TextureSpec, TrajectorySpec


def make_down_camera(camera_id="cam0", width=32, height=32, focal=16.0, mount_height=5.0):
    """Perspective camera mounted `mount_height` above the vehicle origin, looking straight down"""
    # camera x = vehicle x, camera y = -vehicle y, optical axis = -z
    rotation = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    return CameraModel(
        camera_id=camera_id,
        width=width,
        height=height,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        fx=focal,
        fy=focal,
        extrinsic=Pose(rotation, np.array([0.0, 0.0, mount_height])),
    )


def make_tilted_camera(camera_id="cam0", width=32, height=32, focal=16.0, pitch_deg=30.0, mount_height=3.0):
    """Forward-looking perspective camera pitched `pitch_deg` below the horizon"""
    p = np.radians(pitch_deg)
    s, c = np.sin(p), np.cos(p)
    # camera x = -vehicle y, optical axis forward and down
    rotation = np.column_stack([[0.0, -1.0, 0.0], [-s, 0.0, -c], [c, 0.0, -s]])
    return CameraModel(
        camera_id=camera_id,
        width=width,
        height=height,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        fx=focal,
        fy=focal,
        extrinsic=Pose(rotation, np.array([0.0, 0.0, mount_height])),
    )


def make_mask_scene(mask, resolution=1.0, class_count=3, origin=(0.0, 0.0)):
    """Layout-1 scene on an explicit boolean mask"""
    mask = np.asarray(mask, dtype=bool)
    cells = np.argwhere(mask)
    count = len(cells)
    lattice = np.full(mask.shape, EMPTY, dtype=np.int64)
    lattice[cells[:, 0], cells[:, 1]] = np.arange(count)
    quaternion = np.zeros((count, 4))
    quaternion[:, 0] = 1.0
    origin = np.asarray(origin, dtype=np.float64)
    return SurfelScene(
        xy=origin + cells[:, ::-1].astype(np.float64) * resolution,
        z=np.zeros(count),
        color=np.full((count, 3), 0.5),
        log_scale=np.full((count, 2), np.log(resolution)),
        logit_opacity=np.full(count, np.log(0.9 / 0.1)),
        quaternion=quaternion,
        semantics=np.zeros((count, class_count)),
        cells=cells.astype(np.int64),
        lattice=lattice,
        road_mask=mask,
        grid_origin=origin,
        grid_resolution=float(resolution),
        class_palette=[(0, 0, 0)] * class_count,
    )


def make_random_scene(rng, count=20, class_count=3, extent=3.0):
    """Surfels scattered on a row of the lattice with random parameters"""
    scene = make_mask_scene(np.ones((1, count), dtype=bool), resolution=0.5, class_count=class_count)
    scene.xy = rng.uniform(-extent, extent, size=(count, 2))
    scene.z = rng.uniform(-0.3, 0.3, size=count)
    scene.color = rng.uniform(0.0, 1.0, size=(count, 3))
    scene.log_scale = np.log(rng.uniform(0.25, 0.6, size=(count, 2)))
    scene.logit_opacity = rng.uniform(-1.0, 1.0, size=count)
    quaternion = np.column_stack([np.ones(count), rng.normal(0.0, 0.2, size=(count, 3))])
    scene.quaternion = quaternion / np.linalg.norm(quaternion, axis=1, keepdims=True)
    scene.semantics = rng.normal(0.0, 1.0, size=(count, class_count))
    return scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def down_camera():
    return make_down_camera()


@pytest.fixture
def random_scene():
    return make_random_scene


@pytest.fixture
def mask_scene():
    return make_mask_scene


@pytest.fixture
def tiny_spec():
    return SyntheticSpec(
        name="tiny",
        seed=3,
        trajectory=TrajectorySpec(length=4.0, speed=2.0, frame_rate=1.0),
        cameras=CameraRigSpec(count=2, width=32, height=24, fov_deg=90.0, pitch_deg=30.0),
        texture=TextureSpec(zebra_at=[1.0], zebra_length=1.5),
        lidar=LidarSpec(density=5.0, range=6.0),
        gt_resolution=0.25,
        gt_expand=3.0,
    )
