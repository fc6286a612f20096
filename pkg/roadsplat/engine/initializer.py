"""
Initialization of the surfel scene before training.

Each surfel takes the rotation of its nearest vehicle pose (xy distance only)
and, in full mode, the height of the plane through that pose orthogonal to
the pose's up axis n3:

    z_i = z_v - (n31 * (x_i - x_v) + n32 * (y_i - y_v)) / n33

Two optional passes follow: elevations seeded from a LiDAR cloud, and
colors, semantics and camera exposures seeded from the input frames.
"""

from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from config.constants import (
    CLIPPED_LEVEL,
    EXPOSURE_SAMPLE_LIMIT,
    LIDAR_SEED_NEIGHBORS,
    LIDAR_SEED_RADIUS,
    MIN_EXPOSURE_SAMPLES,
    NEAR_PLANE,
    POSE_HASH_CELL_FACTOR,
    SEMANTIC_INIT_LOGIT,
    VERTICAL_POSE_EPSILON,
)
from roadsplat.core.exceptions import EmptyScene, InputError, NearVerticalPose
from roadsplat.core.logging import get_logger, log_performance
from roadsplat.engine.geometry import (
    CameraModel,
    Frame,
    PointCloud,
    Pose,
    camera_pose_world,
    matrix_to_quaternion,
)
from roadsplat.engine.scene import SurfelScene
from roadsplat.models import InitMode

logger = get_logger(__name__)


class PoseSpatialHash:
    """Uniform xy hash of pose positions answering exact nearest-pose queries.

    Candidates come from every occupied cell that could hold a pose closer
    than the best one in the nearest occupied ring, so results equal a brute
    force argmin (ties resolve to the lowest pose index).
    """

    def __init__(self, xy: np.ndarray, cell_size: float):
        if len(xy) == 0:
            raise EmptyScene("no poses to index")
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.xy = np.asarray(xy, dtype=np.float64)
        self.cell_size = float(cell_size)
        buckets: Dict[Tuple[int, int], List[int]] = defaultdict(list)
        for index, key in enumerate(map(tuple, self._keys(self.xy))):
            buckets[key].append(index)
        self._cells = np.array(sorted(buckets), dtype=np.int64)
        self._members = [np.array(buckets[tuple(k)], dtype=np.int64) for k in self._cells]

    def _keys(self, xy: np.ndarray) -> np.ndarray:
        return np.floor(xy / self.cell_size).astype(np.int64)

    def _candidates(self, key: np.ndarray) -> np.ndarray:
        ring = np.max(np.abs(self._cells - key), axis=1)
        nearest_ring = ring.min()
        # any query in this cell has a pose within (nearest_ring + 1) * sqrt(2) cells;
        # a pose in ring r is at least (r - 1) cells away
        reach = int(np.ceil((nearest_ring + 1) * np.sqrt(2.0))) + 1
        selected = np.flatnonzero(ring <= reach)
        return np.sort(np.concatenate([self._members[i] for i in selected]))

    def query(self, query_xy) -> int:
        return int(self.query_many(np.asarray(query_xy, dtype=np.float64)[None, :])[0])

    def query_many(self, query_xy: np.ndarray) -> np.ndarray:
        query_xy = np.asarray(query_xy, dtype=np.float64).reshape(-1, 2)
        result = np.empty(len(query_xy), dtype=np.int64)
        keys = self._keys(query_xy)
        unique_keys, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        order = np.argsort(inverse, kind="stable")
        bounds = np.searchsorted(inverse[order], np.arange(len(unique_keys) + 1))
        for group, key in enumerate(unique_keys):
            members = order[bounds[group] : bounds[group + 1]]
            candidates = self._candidates(key)
            diff = query_xy[members, None, :] - self.xy[None, candidates, :]
            dist2 = diff[..., 0] ** 2 + diff[..., 1] ** 2
            result[members] = candidates[np.argmin(dist2, axis=1)]
        return result


def nearest_pose_xy(poses: Sequence[Pose], query_xy) -> int:
    """Index of the pose nearest to query_xy in the xy-plane; lowest index on ties"""
    if not poses:
        raise EmptyScene("no poses to search")
    xy = np.array([p.translation[:2] for p in poses])
    diff = xy - np.asarray(query_xy, dtype=np.float64)
    return int(np.argmin(diff[:, 0] ** 2 + diff[:, 1] ** 2))


@log_performance(logger)
def init_from_poses(
    scene: SurfelScene, poses: Sequence[Pose], mode: InitMode = InitMode.FULL
) -> SurfelScene:
    """New scene with z and rotation set from the nearest vehicle pose"""
    if not poses:
        raise EmptyScene("no poses to initialize from")
    mode = InitMode(mode)
    result = scene.copy()

    if mode == InitMode.NONE:
        result.z[:] = 0.0
        result.quaternion[:] = (1.0, 0.0, 0.0, 0.0)
        return result

    pose_xy = np.array([p.translation[:2] for p in poses])
    index = PoseSpatialHash(pose_xy, POSE_HASH_CELL_FACTOR * scene.grid_resolution).query_many(
        scene.xy
    )

    used = np.unique(index)
    rotations = np.array([poses[i].rotation for i in used])
    n33 = rotations[:, 2, 2]
    bad = np.abs(n33) <= VERTICAL_POSE_EPSILON
    if np.any(bad):
        raise NearVerticalPose(
            "pose up axis is nearly horizontal",
            {"pose_indices": used[bad].tolist()[:10], "n33": n33[bad].tolist()[:10]},
        )

    all_rotations = np.array([p.rotation for p in poses])
    translations = np.array([p.translation for p in poses])
    n3 = all_rotations[index, :, 2]
    origin = translations[index]

    if mode == InitMode.FULL:
        dx = scene.xy[:, 0] - origin[:, 0]
        dy = scene.xy[:, 1] - origin[:, 1]
        result.z[:] = origin[:, 2] - (n3[:, 0] * dx + n3[:, 1] * dy) / n3[:, 2]
    else:
        result.z[:] = origin[:, 2]

    pose_quaternions = np.zeros((len(poses), 4))
    pose_quaternions[used] = matrix_to_quaternion(rotations)
    result.quaternion[:] = pose_quaternions[index]

    logger.info(
        "Surfels initialized from poses",
        extra={
            "mode": mode.value,
            "surfels": scene.surfel_count,
            "poses_used": int(len(used)),
            "z_min": float(result.z.min()) if len(result.z) else 0.0,
            "z_max": float(result.z.max()) if len(result.z) else 0.0,
        },
    )
    return result


@log_performance(logger)
def seed_elevation_from_cloud(
    scene: SurfelScene,
    cloud: PointCloud,
    radius: float = LIDAR_SEED_RADIUS,
    neighbors: int = LIDAR_SEED_NEIGHBORS,
) -> SurfelScene:
    """New scene whose z is the inverse-distance mean of the cloud elevations
    within `radius` in xy; surfels with no point in reach keep their z"""
    if radius <= 0 or neighbors < 1:
        raise ValueError("radius and neighbors must be positive")
    result = scene.copy()
    if len(cloud) == 0 or scene.surfel_count == 0:
        logger.warning("Nothing to seed elevations from", extra={"points": len(cloud)})
        return result

    k = min(neighbors, len(cloud))
    distance, index = cKDTree(cloud.points[:, :2]).query(scene.xy, k=k, distance_upper_bound=radius)
    distance = np.asarray(distance).reshape(scene.surfel_count, k)
    index = np.asarray(index).reshape(scene.surfel_count, k)
    hit = np.isfinite(distance)
    weight = np.where(hit, 1.0 / np.maximum(distance, 1e-6), 0.0)
    z = cloud.points[np.where(hit, index, 0), 2]
    total = weight.sum(axis=1)
    seeded = total > 0
    result.z[seeded] = np.sum(weight * z, axis=1)[seeded] / total[seeded]

    logger.info(
        "Elevations seeded from the point cloud",
        extra={"seeded": int(np.count_nonzero(seeded)), "surfels": scene.surfel_count, "radius": radius},
    )
    return result


_CLIPPED_PENALTY = 1e6


@dataclass
class _Observations:
    """Sharpest observation of every surfel in one camera"""

    key: np.ndarray  # ground footprint (m^2), penalized when clipped; inf where unseen
    rgb: np.ndarray
    label: np.ndarray
    clean: np.ndarray  # unclipped and inside a uniformly labeled patch

    @classmethod
    def empty(cls, count: int) -> "_Observations":
        return cls(
            key=np.full(count, np.inf),
            rgb=np.zeros((count, 3)),
            label=np.full(count, -1, dtype=np.int64),
            clean=np.zeros(count, dtype=bool),
        )

    def merge(self, indices, key, rgb, label, clean):
        better = key < self.key[indices]
        target = indices[better]
        self.key[target] = key[better]
        self.rgb[target] = rgb[better]
        self.label[target] = label[better]
        self.clean[target] = clean[better]


def _sample_frame(scene: SurfelScene, normals: np.ndarray, frame: Frame, cam: CameraModel):
    """Nearest-pixel samples of every surfel center visible in the frame"""
    pose_cw = camera_pose_world(frame.pose, cam)
    p_cam = pose_cw.inverse().apply(scene.centers())
    front = np.flatnonzero(p_cam[:, 2] > NEAR_PLANE)
    p = p_cam[front]
    col = np.rint(cam.fx * p[:, 0] / p[:, 2] + cam.cx).astype(np.int64)
    row = np.rint(cam.fy * p[:, 1] / p[:, 2] + cam.cy).astype(np.int64)
    height, width = frame.image.shape
    inside = (col >= 0) & (col < width) & (row >= 0) & (row < height)
    indices, p, row, col = front[inside], p[inside], row[inside], col[inside]

    distance = np.linalg.norm(p, axis=1)
    normal_cam = normals[indices] @ pose_cw.rotation
    cosine = np.abs(np.sum(normal_cam * p, axis=1)) / distance
    footprint = distance * distance / (cam.fx * cam.fy * np.maximum(cosine, 1e-3))

    labels = frame.image.labels
    rgb = frame.image.rgb[row, col].astype(np.float64)
    label = labels[row, col].astype(np.int64)
    clipped = np.any((rgb <= CLIPPED_LEVEL) | (rgb >= 1.0 - CLIPPED_LEVEL), axis=1)
    padded = np.pad(labels, 1, mode="edge")
    interior = np.ones(len(row), dtype=bool)
    for dr, dc in ((0, 1), (2, 1), (1, 0), (1, 2)):
        interior &= padded[row + dr, col + dc] == label
    key = footprint + np.where(clipped, _CLIPPED_PENALTY, 0.0)
    return indices, key, rgb, label, interior & ~clipped


def _estimate_exposure(
    reference: _Observations, other: _Observations, ref_cam: CameraModel
) -> Tuple[float, float, int]:
    """(a, b, samples) of `other` from class-mean colors seen by both cameras.

    Per-(class, channel) means of the shared surfels are regressed as
    other = gain * reference + offset, then moved into the gauge of the
    reference camera's own exposure. Returns samples = 0 when too few surfels
    are shared.
    """
    paired = reference.clean & other.clean & (reference.label == other.label)
    count = int(np.count_nonzero(paired))
    if count < MIN_EXPOSURE_SAMPLES:
        return ref_cam.exposure_a, ref_cam.exposure_b, 0

    labels = reference.label[paired]
    if count > EXPOSURE_SAMPLE_LIMIT:
        keep = np.linspace(0, count - 1, EXPOSURE_SAMPLE_LIMIT).astype(np.int64)
        paired = np.flatnonzero(paired)[keep]
        labels = reference.label[paired]
        count = len(paired)
    classes, inverse, sizes = np.unique(labels, return_inverse=True, return_counts=True)
    x = np.zeros((len(classes), 3))
    y = np.zeros((len(classes), 3))
    np.add.at(x, inverse, reference.rgb[paired])
    np.add.at(y, inverse, other.rgb[paired])
    x /= sizes[:, None]
    y /= sizes[:, None]

    weight = np.sqrt(np.repeat(sizes, 3).astype(np.float64))
    design = np.column_stack([x.ravel(), np.ones(x.size)]) * weight[:, None]
    (gain, offset), *_ = np.linalg.lstsq(design, y.ravel() * weight, rcond=None)
    if not np.isfinite(gain) or gain <= 0:
        return ref_cam.exposure_a, ref_cam.exposure_b, 0
    a = float(np.log(gain)) + ref_cam.exposure_a
    b = float(offset + gain * ref_cam.exposure_b)
    return a, b, count


@log_performance(logger)
def init_appearance(
    scene: SurfelScene,
    cameras: Mapping[str, CameraModel],
    frames: Sequence[Frame],
) -> Tuple[SurfelScene, Dict[str, CameraModel]]:
    """Colors, semantic logits and per-camera exposures from the input frames.

    Every surfel takes the color and label of its sharpest unclipped
    observation (smallest ground footprint), with that camera's exposure
    undone. Exposures are estimated against the first sorted camera, whose
    exposure is kept as given. Surfels no frame sees keep their values.
    """
    missing = sorted({f.image.camera_id for f in frames} - set(cameras))
    if missing:
        raise InputError("frames reference unknown cameras", {"camera_ids": missing})
    result = scene.copy()
    cameras = dict(cameras)
    camera_ids = sorted(cameras)
    if not frames or result.surfel_count == 0:
        return result, cameras

    normals = result.rotations()[:, :, 2]
    observed: Dict[str, _Observations] = {cid: _Observations.empty(result.surfel_count) for cid in camera_ids}
    for frame in frames:
        cam = cameras[frame.image.camera_id]
        if cam.is_orthographic:
            continue
        observed[cam.camera_id].merge(*_sample_frame(result, normals, frame, cam))

    reference = camera_ids[0]
    exposures: Dict[str, Tuple[float, float]] = {
        reference: (cameras[reference].exposure_a, cameras[reference].exposure_b)
    }
    samples: Dict[str, int] = {}
    for cid in camera_ids[1:]:
        a, b, count = _estimate_exposure(observed[reference], observed[cid], cameras[reference])
        samples[cid] = count
        if count == 0:
            logger.warning(
                "Too few observations shared with the reference camera; exposure kept",
                extra={"camera_id": cid, "reference": reference},
            )
            a, b = cameras[cid].exposure_a, cameras[cid].exposure_b
        exposures[cid] = (a, b)
        cameras[cid] = cameras[cid].with_exposure(a, b)

    keys = np.stack([observed[cid].key for cid in camera_ids])
    best = np.argmin(keys, axis=0)
    seen = np.isfinite(keys[best, np.arange(result.surfel_count)])
    for ci, cid in enumerate(camera_ids):
        chosen = seen & (best == ci)
        if not np.any(chosen):
            continue
        a, b = exposures[cid]
        result.color[chosen] = np.clip((observed[cid].rgb[chosen] - b) * np.exp(-a), 0.0, 1.0)
        label = observed[cid].label[chosen]
        labeled = (label >= 0) & (label < result.class_count)
        rows = np.flatnonzero(chosen)[labeled]
        result.semantics[rows] = 0.0
        result.semantics[rows, label[labeled]] = SEMANTIC_INIT_LOGIT

    logger.info(
        "Appearance initialized from frames",
        extra={
            "seen": int(np.count_nonzero(seen)),
            "surfels": result.surfel_count,
            "reference": reference,
            "exposure": {cid: list(ab) for cid, ab in exposures.items()},
            "samples": samples,
        },
    )
    return result, cameras
