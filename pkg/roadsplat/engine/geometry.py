"""
Core geometric types: rigid transforms, camera models, image buffers.

Conventions: world z-up; vehicle frame x-forward, y-left, z-up with its origin
at the rear-axle ground point; camera frame z-forward, x-right, y-down.
Pixel (row v, column u) has its center at image coordinate (u, v).
"""

from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from config.constants import BEV_CAMERA_HEIGHT, NEAR_PLANE
from roadsplat.core.exceptions import BehindCamera, InvalidPose
from roadsplat.models import CameraKind, CameraRecord, PoseRecord


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) wxyz quaternions, normalized first"""
    q = np.asarray(q, dtype=np.float64)
    norm = np.sqrt(q[..., 0] ** 2 + q[..., 1] ** 2 + q[..., 2] ** 2 + q[..., 3] ** 2)
    w, x, y, z = (q[..., i] / norm for i in range(4))
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def matrix_to_quaternion(r: np.ndarray) -> np.ndarray:
    """wxyz quaternions (w >= 0) for (..., 3, 3) rotation matrices"""
    r = np.asarray(r, dtype=np.float64)
    flat = r.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i, m in enumerate(flat):
        trace = m[0, 0] + m[1, 1] + m[2, 2]
        if trace > 0:
            s = 2.0 * np.sqrt(trace + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        if q[0] < 0:
            q = -q
        out[i] = q / np.linalg.norm(q)
    return out.reshape(r.shape[:-2] + (4,))


@dataclass(frozen=True)
class Pose:
    """SE(3) transform; columns of rotation are the body axes n1, n2, n3 in world"""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    timestamp: Optional[float] = None

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=1e-6):
            raise InvalidPose("rotation is not orthonormal", {"rotation": rotation.tolist()})
        if abs(np.linalg.det(rotation) - 1.0) > 1e-6:
            raise InvalidPose("rotation is not proper (det != +1)")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_quaternion(cls, q, translation, timestamp: Optional[float] = None) -> "Pose":
        return cls(quaternion_to_matrix(q), translation, timestamp)

    @classmethod
    def from_record(cls, record: PoseRecord) -> "Pose":
        return cls(np.asarray(record.rotation), np.asarray(record.translation))

    def to_record(self) -> PoseRecord:
        return PoseRecord(rotation=self.rotation.tolist(), translation=self.translation.tolist())

    def as_quaternion(self) -> np.ndarray:
        return matrix_to_quaternion(self.rotation)

    @property
    def up(self) -> np.ndarray:
        """n3, the body's up axis in world coordinates"""
        return self.rotation[:, 2]

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation, self.timestamp)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: maps other's frame through self into self's parent frame"""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
            self.timestamp,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (3,) or (N, 3) points from this frame into the parent frame"""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation


@dataclass(frozen=True)
class CameraModel:
    """Pinhole or orthographic camera mounted on the vehicle"""

    camera_id: str
    width: int
    height: int
    cx: float
    cy: float
    fx: float = 0.0
    fy: float = 0.0
    extrinsic: Pose = field(default_factory=Pose)
    exposure_a: float = 0.0
    exposure_b: float = 0.0
    kind: CameraKind = CameraKind.PERSPECTIVE
    ortho_scale: float = 0.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera resolution must be positive")
        if self.kind == CameraKind.PERSPECTIVE and (self.fx <= 0 or self.fy <= 0):
            raise ValueError("perspective cameras need fx, fy > 0")
        if self.kind == CameraKind.ORTHOGRAPHIC and self.ortho_scale <= 0:
            raise ValueError("orthographic cameras need ortho_scale > 0")

    @property
    def is_orthographic(self) -> bool:
        return self.kind == CameraKind.ORTHOGRAPHIC

    def with_exposure(self, a: float, b: float) -> "CameraModel":
        return replace(self, exposure_a=float(a), exposure_b=float(b))

    @classmethod
    def from_record(cls, record: CameraRecord) -> "CameraModel":
        return cls(
            camera_id=record.camera_id,
            width=record.width,
            height=record.height,
            cx=record.cx,
            cy=record.cy,
            fx=record.fx,
            fy=record.fy,
            extrinsic=Pose.from_record(record.extrinsic),
            exposure_a=record.exposure_a,
            exposure_b=record.exposure_b,
            kind=record.kind,
            ortho_scale=record.ortho_scale,
        )

    def to_record(self) -> CameraRecord:
        return CameraRecord(
            camera_id=self.camera_id,
            kind=self.kind,
            fx=self.fx,
            fy=self.fy,
            cx=self.cx,
            cy=self.cy,
            width=self.width,
            height=self.height,
            extrinsic=self.extrinsic.to_record(),
            exposure_a=self.exposure_a,
            exposure_b=self.exposure_b,
            ortho_scale=self.ortho_scale,
        )


@dataclass
class LabeledImage:
    """RGB image, label map and loss mask on one pixel grid"""

    rgb: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    camera_id: str
    pose_id: str

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError("rgb must be H x W x 3")
        if self.labels.shape != self.rgb.shape[:2] or self.mask.shape != self.rgb.shape[:2]:
            raise ValueError("rgb, labels and mask must share dimensions")

    @classmethod
    def from_labels(cls, rgb, labels, road_classes, camera_id: str, pose_id: str) -> "LabeledImage":
        labels = np.asarray(labels)
        mask = np.isin(labels, np.asarray(list(road_classes)))
        return cls(rgb, labels, mask, camera_id, pose_id)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.rgb.shape[:2]


@dataclass
class Frame:
    """A labeled image with the vehicle pose it was captured at"""

    image: LabeledImage
    pose: Pose


@dataclass
class PointCloud:
    """Points (N, 3) with optional per-point colors and labels"""

    points: np.ndarray
    colors: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    timestamp: Optional[float] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != n:
                raise ValueError("colors must have one row per point")
        if self.labels is not None:
            self.labels = np.asarray(self.labels).reshape(-1)
            if len(self.labels) != n:
                raise ValueError("labels must have one entry per point")

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, pose: Pose) -> "PointCloud":
        return PointCloud(pose.apply(self.points), self.colors, self.labels, self.timestamp)


def camera_pose_world(pose_vehicle: Pose, cam: CameraModel) -> Pose:
    """Camera-to-world pose"""
    return pose_vehicle.compose(cam.extrinsic)


def world_to_camera_matrix(pose_vehicle: Pose, cam: CameraModel) -> np.ndarray:
    """The 4x4 world-to-camera transform W"""
    return camera_pose_world(pose_vehicle, cam).inverse().matrix()


def world_to_camera(pose_vehicle: Pose, cam: CameraModel, p_world: np.ndarray) -> np.ndarray:
    """Points (3,) or (N, 3) from world into the camera frame"""
    return camera_pose_world(pose_vehicle, cam).inverse().apply(p_world)


def camera_to_world(pose_vehicle: Pose, cam: CameraModel, p_cam: np.ndarray) -> np.ndarray:
    return camera_pose_world(pose_vehicle, cam).apply(p_cam)


def perspective_jacobian(cam: CameraModel, p_cam: np.ndarray) -> np.ndarray:
    """d(u, v)/d(x, y, z) at camera-frame points, shape (..., 2, 3)"""
    p = np.asarray(p_cam, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    jac = np.zeros(p.shape[:-1] + (2, 3))
    jac[..., 0, 0] = cam.fx / z
    jac[..., 0, 2] = -cam.fx * x / (z * z)
    jac[..., 1, 1] = cam.fy / z
    jac[..., 1, 2] = -cam.fy * y / (z * z)
    return jac


def project_perspective(cam: CameraModel, p_cam: np.ndarray):
    """Pinhole projection; returns (u, v, depth, J)"""
    p = np.asarray(p_cam, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= NEAR_PLANE):
        raise BehindCamera(
            "point at or behind the near plane",
            {"near_plane": NEAR_PLANE, "min_depth": float(np.min(z))},
        )
    u = cam.fx * p[..., 0] / z + cam.cx
    v = cam.fy * p[..., 1] / z + cam.cy
    return u, v, z, perspective_jacobian(cam, p)


def orthographic_jacobian(cam: CameraModel, shape: Tuple[int, ...] = ()) -> np.ndarray:
    jac = np.zeros(shape + (2, 3))
    jac[..., 0, 0] = 1.0 / cam.ortho_scale
    jac[..., 1, 1] = 1.0 / cam.ortho_scale
    return jac


def project_orthographic(cam: CameraModel, p_cam: np.ndarray):
    """Orthographic projection looking along -z; returns (u, v, depth)"""
    p = np.asarray(p_cam, dtype=np.float64)
    u = p[..., 0] / cam.ortho_scale + cam.cx
    v = p[..., 1] / cam.ortho_scale + cam.cy
    return u, v, -p[..., 2]


def bev_camera(origin_x: float, origin_y: float, resolution: float, width: int, height: int):
    """Top-down orthographic camera whose pixel (r, c) centers on
    (origin_x + c * resolution, origin_y + r * resolution).

    Returns the (vehicle pose, camera) pair expected by the renderer.
    """
    cam = CameraModel(
        camera_id="bev",
        width=width,
        height=height,
        cx=0.0,
        cy=0.0,
        kind=CameraKind.ORTHOGRAPHIC,
        ortho_scale=resolution,
    )
    pose = Pose(np.eye(3), np.array([origin_x, origin_y, BEV_CAMERA_HEIGHT]))
    return pose, cam
