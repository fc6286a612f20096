"""
Ground truth from point clouds, and the reconstruction metrics:
PSNR (image quality), mIoU (semantics) and elevation RMSE (geometry).
"""

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from config.constants import (
    ASSOCIATION_THRESHOLD,
    COVERAGE_ALPHA,
    DEFAULT_RESOLUTION,
    ELEVATION_RADIUS,
    NEAR_PLANE,
    PSNR_CAP,
    VOID_LABEL,
)
from roadsplat.core.exceptions import EmptyMask, MissingGT, NoAssociation, NoMatches
from roadsplat.core.logging import get_logger, log_performance
from roadsplat.engine.geometry import CameraModel, Frame, PointCloud, Pose, world_to_camera
from roadsplat.engine.losses import match_cloud
from roadsplat.engine.rasterizer import BevMaps, render_bev_chunked
from roadsplat.engine.scene import BevGrid, SurfelScene
from roadsplat.models import EvaluationReport, EvaluationRow

logger = get_logger(__name__)


@dataclass
class GroundTruthBev:
    """Reference BEV layers; labels hold VOID_LABEL outside valid_mask"""

    grid: BevGrid
    rgb: np.ndarray
    labels: np.ndarray
    valid_mask: np.ndarray
    elevation: np.ndarray  # (M, 3) world points
    class_count: int


@dataclass
class CloudFrame:
    """A LiDAR sweep in the vehicle frame plus the pose it was taken at"""

    cloud: PointCloud
    pose: Pose


@dataclass
class ElevationError:
    rmse: float
    matched_fraction: float
    matched: int


def colorize_points(
    points: np.ndarray,
    views: Sequence[Tuple[Frame, CameraModel]],
    class_count: int,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean color and mode label of world points over every image that sees
    them. Returns (colors, labels, observed); mode ties go to the lowest id."""
    count = len(points)
    color_sum = np.zeros((count, 3))
    seen = np.zeros(count, dtype=np.int64)
    votes = np.zeros((count, class_count), dtype=np.int64)
    for frame, cam in views:
        p_cam = world_to_camera(frame.pose, cam, points)
        front = np.flatnonzero(p_cam[:, 2] > NEAR_PLANE)
        if cam.is_orthographic:
            front = np.arange(count)
            u = p_cam[front, 0] / cam.ortho_scale + cam.cx
            v = p_cam[front, 1] / cam.ortho_scale + cam.cy
        else:
            z = p_cam[front, 2]
            u = cam.fx * p_cam[front, 0] / z + cam.cx
            v = cam.fy * p_cam[front, 1] / z + cam.cy
        col = np.rint(u).astype(np.int64)
        row = np.rint(v).astype(np.int64)
        inside = (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
        idx, row, col = front[inside], row[inside], col[inside]
        color_sum[idx] += frame.image.rgb[row, col]
        seen[idx] += 1
        labels = frame.image.labels[row, col].astype(np.int64)
        known = labels < class_count
        np.add.at(votes, (idx[known], labels[known]), 1)

    observed = seen > 0
    colors = np.zeros((count, 3))
    colors[observed] = color_sum[observed] / seen[observed, None]
    point_labels = np.full(count, VOID_LABEL, dtype=np.int64)
    voted = votes.sum(axis=1) > 0
    point_labels[voted] = np.argmax(votes[voted], axis=1)
    return colors, point_labels, observed


def rasterize_points(
    points: np.ndarray, colors: np.ndarray, labels: np.ndarray, grid: BevGrid, class_count: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel mean color and mode label of points on a BEV grid"""
    rgb = np.zeros(grid.shape + (3,))
    label_map = np.full(grid.shape, VOID_LABEL, dtype=np.uint8)
    valid = np.zeros(grid.shape, dtype=bool)
    if len(points) == 0:
        return rgb, label_map, valid

    pixels, inside = grid.world_to_pixel(points[:, :2])
    flat = pixels[inside, 0] * grid.width + pixels[inside, 1]
    colors, labels = colors[inside], labels[inside]
    unique, inverse = np.unique(flat, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse)
    mean = np.stack(
        [np.bincount(inverse, colors[:, k], minlength=len(unique)) for k in range(3)], axis=1
    ) / counts[:, None]
    votes = np.bincount(
        inverse * class_count + labels, minlength=len(unique) * class_count
    ).reshape(len(unique), class_count)

    rows, cols = np.divmod(unique, grid.width)
    rgb[rows, cols] = mean
    label_map[rows, cols] = np.argmax(votes, axis=1).astype(np.uint8)
    valid[rows, cols] = True
    return rgb, label_map, valid


def associate(timestamp: float, frame_times: np.ndarray, threshold: float) -> int:
    """Index of the nearest frame time; NoAssociation beyond the threshold"""
    if timestamp is None:
        raise NoAssociation("point cloud has no timestamp")
    gaps = np.abs(frame_times - timestamp)
    best = int(np.argmin(gaps))
    if gaps[best] > threshold:
        raise NoAssociation(
            "no frame within the association threshold",
            {"timestamp": timestamp, "nearest_gap": float(gaps[best]), "threshold": threshold},
        )
    return best


@log_performance(logger)
def build_gt(
    clouds: Sequence[CloudFrame],
    frames: Sequence[Frame],
    cams: Mapping[str, CameraModel],
    road_classes: Sequence[int],
    class_count: int,
    grid: Optional[BevGrid] = None,
    resolution: float = DEFAULT_RESOLUTION,
    threshold: float = ASSOCIATION_THRESHOLD,
) -> GroundTruthBev:
    """Colorize each sweep from the images of its nearest frame, keep road
    points, and rasterize them to BEV (mean color, mode label)"""
    if not clouds:
        raise MissingGT("no point clouds to build ground truth from")
    groups: Dict[float, List[Frame]] = {}
    for frame in frames:
        groups.setdefault(frame.pose.timestamp, []).append(frame)
    times = np.array([t for t in groups if t is not None], dtype=np.float64)
    keys = [t for t in groups if t is not None]
    if len(times) == 0:
        raise NoAssociation("frames carry no timestamps")

    road = np.asarray(list(road_classes))
    kept_points, kept_colors, kept_labels = [], [], []
    for sweep in clouds:
        group = groups[keys[associate(sweep.pose.timestamp, times, threshold)]]
        points = sweep.pose.apply(sweep.cloud.points)
        views = [(frame, cams[frame.image.camera_id]) for frame in group]
        colors, labels, observed = colorize_points(points, views, class_count)
        keep = observed & np.isin(labels, road)
        kept_points.append(points[keep])
        kept_colors.append(colors[keep])
        kept_labels.append(labels[keep])

    points = np.concatenate(kept_points) if kept_points else np.zeros((0, 3))
    colors = np.concatenate(kept_colors) if kept_colors else np.zeros((0, 3))
    labels = np.concatenate(kept_labels) if kept_labels else np.zeros(0, dtype=np.int64)
    if grid is None:
        if len(points) == 0:
            raise MissingGT("no road points survived colorization")
        lo = points[:, :2].min(axis=0)
        hi = points[:, :2].max(axis=0)
        size = np.floor((hi - lo) / resolution + 1e-9).astype(int) + 1
        grid = BevGrid(float(lo[0]), float(lo[1]), resolution, int(size[0]), int(size[1]))

    rgb, label_map, valid = rasterize_points(points, colors, labels, grid, class_count)
    logger.info(
        "Ground truth built",
        extra={"sweeps": len(clouds), "road_points": len(points), "valid_pixels": int(valid.sum())},
    )
    return GroundTruthBev(grid, rgb, label_map, valid, points, class_count)


def psnr(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """10 log10(1 / MSE) over masked pixels, peak 1.0, capped at 99 dB"""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("PSNR mask is empty")
    mse = float(np.mean((pred[mask] - gt[mask]) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, class_count: int) -> np.ndarray:
    """(C+1) x (C+1) counts; row = gt, column = pred; index C collects void"""
    pred = np.where((pred >= 0) & (pred < class_count), pred, class_count).astype(np.int64)
    gt = np.where((gt >= 0) & (gt < class_count), gt, class_count).astype(np.int64)
    size = class_count + 1
    return np.bincount(gt * size + pred, minlength=size * size).reshape(size, size)


def miou(pred_labels: np.ndarray, gt_labels: np.ndarray, mask: np.ndarray, class_count: int) -> float:
    """Mean IoU over the classes present in the masked ground truth"""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("mIoU mask is empty")
    conf = confusion_matrix(np.asarray(pred_labels)[mask], np.asarray(gt_labels)[mask], class_count)
    tp = np.diag(conf)[:class_count].astype(np.float64)
    gt_total = conf.sum(axis=1)[:class_count]
    pred_total = conf.sum(axis=0)[:class_count]
    present = gt_total > 0
    if not present.any():
        raise EmptyMask("no ground-truth class inside the mask")
    union = gt_total + pred_total - tp
    return float(np.mean(tp[present] / union[present]))


def elevation_error(xy: np.ndarray, z: np.ndarray, gt: GroundTruthBev, radius: float = ELEVATION_RADIUS) -> ElevationError:
    """RMSE between heights at xy and the nearest GT point within `radius`"""
    match = match_cloud(xy, PointCloud(gt.elevation), radius)
    if len(match) == 0:
        raise NoMatches("no position has a ground-truth point within the radius", {"radius": radius})
    residual = z[match.surfels] - match.target_z
    return ElevationError(
        rmse=float(np.sqrt(np.mean(residual * residual))),
        matched_fraction=len(match) / len(z),
        matched=len(match),
    )


def elevation_rmse(scene: SurfelScene, gt: GroundTruthBev, radius: float = ELEVATION_RADIUS) -> ElevationError:
    """RMSE between surfel z and the nearest GT point within `radius` in xy"""
    return elevation_error(scene.xy, scene.z, gt, radius)


def map_elevation_points(maps: BevMaps) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel-center xy and height of every covered BEV pixel"""
    xs, ys = maps.grid.pixel_centers()
    covered = np.isfinite(maps.elevation)
    return np.column_stack([xs[covered], ys[covered]]), maps.elevation[covered]


def coverage(alpha: np.ndarray, valid_mask: np.ndarray) -> float:
    """Fraction of GT-valid pixels the reconstruction covers"""
    valid_mask = np.asarray(valid_mask, dtype=bool)
    if not valid_mask.any():
        return 0.0
    return float(np.mean(alpha[valid_mask] > COVERAGE_ALPHA))


def evaluate_maps(
    name: str,
    maps: BevMaps,
    gt: GroundTruthBev,
    scene: Optional[SurfelScene] = None,
    radius: float = ELEVATION_RADIUS,
) -> EvaluationRow:
    """Metrics of rendered BEV maps on the GT-valid pixels"""
    if maps.rgb.shape[:2] != gt.rgb.shape[:2]:
        raise ValueError("BEV maps and ground truth use different grids")
    row = EvaluationRow(
        scene=name,
        psnr=psnr(maps.rgb, gt.rgb, gt.valid_mask),
        miou=miou(maps.labels, gt.labels, gt.valid_mask, gt.class_count),
        coverage=coverage(maps.alpha, gt.valid_mask),
    )
    if len(gt.elevation):
        if scene is not None:
            xy, z = scene.xy, scene.z
        else:
            xy, z = map_elevation_points(maps)
        try:
            error = elevation_error(xy, z, gt, radius)
            row.elevation_rmse = error.rmse
            row.matched_fraction = error.matched_fraction
        except NoMatches:
            logger.warning("No elevation matches", extra={"scene": name})
    return row


def evaluate_scene(
    scene: SurfelScene, gt: GroundTruthBev, name: str = "scene", radius: float = ELEVATION_RADIUS
) -> EvaluationRow:
    """Render the scene on the GT grid and score it"""
    maps = render_bev_chunked(scene, grid=gt.grid)
    return evaluate_maps(name, maps, gt, scene, radius)


def make_report(rows: Sequence[EvaluationRow]) -> EvaluationReport:
    """Rows sorted by scene name plus a mean row"""
    ordered = sorted(rows, key=lambda r: r.scene)
    elevations = [r.elevation_rmse for r in ordered if r.elevation_rmse is not None]
    mean = EvaluationRow(
        scene="mean",
        psnr=float(np.mean([r.psnr for r in ordered])) if ordered else 0.0,
        miou=float(np.mean([r.miou for r in ordered])) if ordered else 0.0,
        elevation_rmse=float(np.mean(elevations)) if elevations else None,
        matched_fraction=float(np.mean([r.matched_fraction for r in ordered])) if ordered else 0.0,
        coverage=float(np.mean([r.coverage for r in ordered])) if ordered else 0.0,
    )
    return EvaluationReport(rows=list(ordered), mean=mean)
