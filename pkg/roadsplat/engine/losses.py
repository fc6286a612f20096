"""
Training objectives and their gradients.

    L_total = λc·L_c + λs·L_s + λsmooth·L_smooth + λz·L_z

L_c is a masked L1 over RGB channels, L_s a masked cross-entropy on the
softmax of the composited semantic logits, L_smooth the squared elevation
difference to the four lattice neighbors divided by K = 4, and L_z the mean
squared difference to the nearest LiDAR elevation within a radius.
"""

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from config.constants import ELEVATION_RADIUS, SMOOTH_NEIGHBORS
from roadsplat.core.exceptions import EmptyMask, NonFiniteLoss
from roadsplat.engine.geometry import LabeledImage, PointCloud
from roadsplat.engine.scene import SurfelScene
from roadsplat.models import LossWeights

Rendered = Union[np.ndarray, object]


@dataclass
class LossParts:
    color: float = 0.0
    semantic: float = 0.0
    smooth: float = 0.0
    elevation: float = 0.0

    def as_dict(self) -> dict:
        return {"L_c": self.color, "L_s": self.semantic, "L_smooth": self.smooth, "L_z": self.elevation}


@dataclass
class ElevationMatch:
    """Surfels with a cloud point within the radius, and that point's z"""

    surfels: np.ndarray
    target_z: np.ndarray

    def __len__(self) -> int:
        return len(self.surfels)


def _layer(render: Rendered, name: str) -> np.ndarray:
    return np.asarray(getattr(render, name, render), dtype=np.float64)


def _mask_count(target: LabeledImage) -> int:
    count = int(np.count_nonzero(target.mask))
    if count == 0:
        raise EmptyMask(
            "no road pixels in target",
            {"camera_id": target.camera_id, "pose_id": target.pose_id},
        )
    return count


def color_loss(render: Rendered, target: LabeledImage) -> Tuple[float, np.ndarray]:
    """Masked L1 normalized per channel; returns (loss, dL/dcolor)"""
    color = _layer(render, "color")
    if color.shape != target.rgb.shape:
        raise ValueError(f"render shape {color.shape} != target shape {target.rgb.shape}")
    count = _mask_count(target)
    residual = (color - target.rgb) * target.mask[..., None]
    norm = count * 3.0
    loss = float(np.sum(np.abs(residual)) / norm)
    return loss, np.sign(residual) / norm


def semantic_loss(render: Rendered, target: LabeledImage) -> Tuple[float, np.ndarray]:
    """Masked cross-entropy of softmax(rendered logits) against one-hot labels"""
    logits = _layer(render, "semantics")
    if logits.shape[:2] != target.shape:
        raise ValueError("render and target dimensions differ")
    count = _mask_count(target)
    classes = logits.shape[2]
    mask = target.mask
    labels = target.labels[mask].astype(np.int64)
    if np.any(labels >= classes) or np.any(labels < 0):
        raise ValueError("masked labels fall outside the class range")

    selected = logits[mask]
    shifted = selected - selected.max(axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1))
    log_prob = shifted - log_norm[:, None]
    rows = np.arange(len(labels))
    loss = float(-np.sum(log_prob[rows, labels]) / count)

    prob = np.exp(log_prob)
    prob[rows, labels] -= 1.0
    grad = np.zeros_like(logits)
    grad[mask] = prob / count
    return loss, grad


def smooth_loss(scene: SurfelScene, neighbors: np.ndarray) -> Tuple[float, np.ndarray]:
    """Σ_i Σ_{j ∈ N(i)} (z_i - z_j)^2 / K over the four lattice directions"""
    z = scene.z
    loss = 0.0
    grad = np.zeros_like(z)
    count = len(z)
    for direction in neighbors:
        diff = z - z[direction]
        loss += float(np.sum(diff * diff))
        grad += 2.0 * diff / SMOOTH_NEIGHBORS
        grad -= np.bincount(direction, 2.0 * diff / SMOOTH_NEIGHBORS, minlength=count)
    return loss / SMOOTH_NEIGHBORS, grad


def match_cloud(xy: np.ndarray, cloud: PointCloud, radius: float = ELEVATION_RADIUS) -> ElevationMatch:
    """Nearest cloud point in xy within `radius` for each query position"""
    if radius <= 0:
        raise ValueError("radius must be positive")
    xy = np.asarray(xy, dtype=np.float64)
    if len(cloud) == 0 or len(xy) == 0:
        return ElevationMatch(np.zeros(0, dtype=np.int64), np.zeros(0))
    tree = cKDTree(cloud.points[:, :2])
    distance, nearest = tree.query(xy, k=1, distance_upper_bound=radius)
    hit = np.isfinite(distance)
    return ElevationMatch(np.flatnonzero(hit), cloud.points[nearest[hit], 2])


def elevation_loss_from_match(
    scene: SurfelScene, match: ElevationMatch, reduction: str = "sum"
) -> Tuple[float, np.ndarray]:
    """Squared residuals of matched surfels, summed like the smoothness term
    so the two keep their balance at any scene size, or averaged"""
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    grad = np.zeros_like(scene.z)
    if len(match) == 0:
        return 0.0, grad
    residual = scene.z[match.surfels] - match.target_z
    count = len(match) if reduction == "mean" else 1
    grad[match.surfels] = 2.0 * residual / count
    return float(np.sum(residual * residual) / count), grad


def elevation_loss(
    scene: SurfelScene, cloud: PointCloud, radius: float = ELEVATION_RADIUS, reduction: str = "sum"
) -> Tuple[float, np.ndarray]:
    """Squared difference between matched surfels and the nearest cloud
    elevation within `radius` in xy; unmatched surfels contribute nothing"""
    return elevation_loss_from_match(scene, match_cloud(scene.xy, cloud, radius), reduction)


def total_loss(parts: LossParts, weights: LossWeights, use_lidar: bool = False, step=None) -> float:
    """Weighted objective; the elevation term enters only with LiDAR supervision"""
    for name, value in parts.as_dict().items():
        if not np.isfinite(value):
            raise NonFiniteLoss(name, step=step, value=value)
    total = (
        weights.lambda_c * parts.color
        + weights.lambda_s * parts.semantic
        + weights.smooth_weight(use_lidar) * parts.smooth
    )
    if use_lidar:
        total += weights.lambda_z * parts.elevation
    return float(total)
