"""
Synthetic road scenes with known texture, semantics and elevation.

An analytic surface h(x, y) carries a procedural road texture laid out along a
centerline (lanes, dashed center line, zebra crossings, stop lines, curbs,
terrain). Vehicle poses sit on the surface and are parallel to it. Camera
images come from direct ray-surface intersection, so they do not depend on the
surfel renderer. The analytic BEV layers are emitted as ground truth.
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError
from scipy.ndimage import map_coordinates
from scipy.spatial import cKDTree
from tqdm import tqdm

from config.constants import VOID_LABEL
from roadsplat.core.config import get_settings
from roadsplat.core.exceptions import InvalidSpec
from roadsplat.core.logging import get_logger, log_performance
from roadsplat.engine.evaluation import GroundTruthBev
from roadsplat.engine.geometry import CameraModel, Frame, LabeledImage, PointCloud, Pose, camera_pose_world
from roadsplat.engine.scene import bev_grid_for, build_layout
from roadsplat.models import (
    CameraRigSpec,
    SceneManifest,
    SurfaceKind,
    SurfaceSpec,
    SyntheticSpec,
    TrajectoryKind,
    TrajectorySpec,
)

logger = get_logger(__name__)
settings = get_settings()

ROAD, LANE_LINE, CROSSWALK, ROAD_MARKING, CURB, TERRAIN, SKY = range(7)

BASE_COLORS = np.array(
    [
        [0.35, 0.35, 0.37],
        [0.92, 0.92, 0.92],
        [0.95, 0.95, 0.90],
        [0.95, 0.80, 0.20],
        [0.65, 0.65, 0.62],
        [0.30, 0.50, 0.25],
        [0.55, 0.70, 0.90],
    ]
)

CENTERLINE_STEP = 0.1  # meters between dense centerline samples
MAX_RAY_DISTANCE = 200.0
NEWTON_ITERATIONS = 30


class AnalyticSurface:
    """Single-valued C1 height field"""

    def __init__(self, spec: SurfaceSpec, half_width: float):
        self.spec = spec
        self.half_width = half_width

    def height(self, x, y) -> np.ndarray:
        s = self.spec
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if s.kind == SurfaceKind.PLANE:
            return np.full(np.broadcast(x, y).shape, s.height)
        if s.kind == SurfaceKind.INCLINED:
            return s.height + s.slope_x * x + s.slope_y * y
        if s.kind == SurfaceKind.BUMPS:
            k = 2.0 * math.pi / s.wavelength
            return s.height + s.amplitude * np.sin(k * x) * np.cos(k * y)
        offset = (y - s.crown_center_y) / self.half_width
        return s.height - s.crown * offset * offset

    def gradient(self, x, y) -> Tuple[np.ndarray, np.ndarray]:
        s = self.spec
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        shape = np.broadcast(x, y).shape
        if s.kind == SurfaceKind.PLANE:
            return np.zeros(shape), np.zeros(shape)
        if s.kind == SurfaceKind.INCLINED:
            return np.full(shape, s.slope_x), np.full(shape, s.slope_y)
        if s.kind == SurfaceKind.BUMPS:
            k = 2.0 * math.pi / s.wavelength
            hx = s.amplitude * k * np.cos(k * x) * np.cos(k * y)
            hy = -s.amplitude * k * np.sin(k * x) * np.sin(k * y)
            return hx, hy
        hy = -2.0 * s.crown * (y - s.crown_center_y) / (self.half_width * self.half_width)
        return np.zeros(shape), np.broadcast_to(hy, shape).copy()

    def normal(self, x, y) -> np.ndarray:
        hx, hy = self.gradient(x, y)
        n = np.stack([-hx, -hy, np.ones_like(hx)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)


class Trajectory:
    """Planar centerline parameterized by arc length s in [0, length]"""

    def __init__(self, spec: TrajectorySpec):
        self.spec = spec
        self.origin = np.asarray(spec.start, dtype=np.float64)
        self.tangent0 = np.array([math.cos(spec.heading), math.sin(spec.heading)])
        self.normal0 = np.array([-math.sin(spec.heading), math.cos(spec.heading)])

    @property
    def length(self) -> float:
        return self.spec.length

    def point(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        spec = self.spec
        if spec.kind == TrajectoryKind.ARC:
            theta = s / spec.radius
            along = spec.radius * np.sin(theta)
            across = spec.radius * (1.0 - np.cos(theta))
        elif spec.kind == TrajectoryKind.S_CURVE:
            along = s
            across = spec.amplitude * np.sin(2.0 * math.pi * s / spec.length)
        else:
            along = s
            across = np.zeros_like(s)
        return self.origin + along[..., None] * self.tangent0 + across[..., None] * self.normal0

    def heading(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        spec = self.spec
        if spec.kind == TrajectoryKind.ARC:
            return spec.heading + s / spec.radius
        if spec.kind == TrajectoryKind.S_CURVE:
            k = 2.0 * math.pi / spec.length
            return spec.heading + np.arctan(spec.amplitude * k * np.cos(k * s))
        return np.full(s.shape, spec.heading)

    def frame_positions(self) -> np.ndarray:
        """Arc-length positions of the camera frames"""
        spacing = self.spec.speed / self.spec.frame_rate
        count = int(math.floor(self.spec.length / spacing + 1e-9)) + 1
        return np.arange(count) * spacing


class Centerline:
    """Dense samples of the trajectory, extended straight past both ends,
    for (along, lateral) road coordinates of world points"""

    def __init__(self, trajectory: Trajectory, margin: float):
        s = np.arange(-margin, trajectory.length + margin + CENTERLINE_STEP, CENTERLINE_STEP)
        inside = np.clip(s, 0.0, trajectory.length)
        heading = trajectory.heading(inside)
        tangent = np.stack([np.cos(heading), np.sin(heading)], axis=1)
        points = trajectory.point(inside) + (s - inside)[:, None] * tangent
        self.s = s
        self.points = points
        self.tangent = tangent
        self.normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)
        self.tree = cKDTree(points)

    def road_coords(self, xy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        _, nearest = self.tree.query(xy)
        offset = xy - self.points[nearest]
        along = self.s[nearest] + np.sum(offset * self.tangent[nearest], axis=1)
        lateral = np.sum(offset * self.normal[nearest], axis=1)
        return along, lateral


class ValueNoise:
    """Bilinear value noise on a seeded lattice"""

    def __init__(self, lo: np.ndarray, hi: np.ndarray, scale: float, rng: np.random.Generator):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.scale = scale
        shape = np.ceil((np.asarray(hi) - self.lo) / scale).astype(int) + 2
        self.values = rng.uniform(-1.0, 1.0, size=(shape[1], shape[0]))

    def __call__(self, xy: np.ndarray) -> np.ndarray:
        coords = (np.asarray(xy, dtype=np.float64) - self.lo) / self.scale
        return map_coordinates(self.values, [coords[:, 1], coords[:, 0]], order=1, mode="nearest")


class RoadTexture:
    """Colors and class ids of the road layout at world xy"""

    def __init__(self, spec: SyntheticSpec, centerline: Centerline, noise: ValueNoise):
        self.spec = spec.texture
        self.centerline = centerline
        self.noise = noise

    def labels(self, xy: np.ndarray) -> np.ndarray:
        t = self.spec
        along, lateral = self.centerline.road_coords(xy)
        dist = np.abs(lateral)
        half = t.half_width
        labels = np.full(len(along), ROAD, dtype=np.uint8)

        for k in range(1, t.lanes):
            center = -half + k * t.lane_width
            period = t.dash_length + t.dash_gap
            dashed = np.mod(along, period) < t.dash_length
            labels[(np.abs(lateral - center) <= t.line_width / 2.0) & dashed] = LANE_LINE
        edge = half - t.line_width
        labels[np.abs(dist - edge) <= t.line_width / 2.0] = LANE_LINE

        for start in t.zebra_at:
            band = (along >= start) & (along <= start + t.zebra_length) & (dist < edge - t.line_width)
            stripe = np.mod(np.floor((lateral + half) / t.zebra_stripe), 2) == 0
            labels[band & stripe] = CROSSWALK
            if t.stop_line_width > 0:
                stop_end = start - 1.0
                stop = (along >= stop_end - t.stop_line_width) & (along <= stop_end)
                labels[stop & (lateral < 0) & (dist < edge - t.line_width)] = ROAD_MARKING

        labels[dist > half] = CURB
        labels[dist > half + t.curb_width] = TERRAIN
        return labels

    def sample(self, xy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        labels = self.labels(xy)
        colors = BASE_COLORS[labels].copy()
        if self.spec.noise_amplitude > 0 and len(xy):
            textured = (labels == ROAD) | (labels == TERRAIN)
            colors[textured] += self.spec.noise_amplitude * self.noise(xy[textured])[:, None]
        return np.clip(colors, 0.0, 1.0), labels


def surface_pose(surface: AnalyticSurface, xy, heading: float, timestamp: float) -> Pose:
    """Pose at the surface point below xy: x along the heading projected onto
    the tangent plane, z along the surface normal"""
    x, y = float(xy[0]), float(xy[1])
    hx, hy = (float(v) for v in surface.gradient(x, y))
    n3 = np.array([-hx, -hy, 1.0])
    n3 /= np.linalg.norm(n3)
    c, s = math.cos(heading), math.sin(heading)
    n1 = np.array([c, s, hx * c + hy * s])
    n1 /= np.linalg.norm(n1)
    n2 = np.cross(n3, n1)
    rotation = np.column_stack([n1, n2, n3])
    return Pose(rotation, np.array([x, y, float(surface.height(x, y))]), timestamp)


def camera_rig(spec: CameraRigSpec) -> Dict[str, CameraModel]:
    """Cameras evenly spaced in yaw around the vehicle, tilted down"""
    fx = (spec.width / 2.0) / math.tan(math.radians(spec.fov_deg) / 2.0)
    pitch = math.radians(spec.pitch_deg)
    cameras = {}
    for k in range(spec.count):
        yaw = 2.0 * math.pi * k / spec.count
        forward = np.array([math.cos(yaw) * math.cos(pitch), math.sin(yaw) * math.cos(pitch), -math.sin(pitch)])
        right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
        down = np.cross(forward, right)
        extrinsic = Pose(
            np.column_stack([right, down, forward]),
            np.array([spec.mount_radius * math.cos(yaw), spec.mount_radius * math.sin(yaw), spec.mount_height]),
        )
        camera_id = f"cam{k}"
        cameras[camera_id] = CameraModel(
            camera_id=camera_id,
            width=spec.width,
            height=spec.height,
            cx=(spec.width - 1) / 2.0,
            cy=(spec.height - 1) / 2.0,
            fx=fx,
            fy=fx,
            extrinsic=extrinsic,
        )
    return cameras


def intersect_surface(surface: AnalyticSurface, origin: np.ndarray, directions: np.ndarray):
    """Ray parameters t of the first surface hit; NaN where a ray misses"""
    dz = directions[:, 2]
    t = np.full(len(directions), np.nan)
    down = dz < -1e-6
    h0 = float(surface.height(origin[0], origin[1]))
    t[down] = (h0 - origin[2]) / dz[down]
    active = down & (t > 0) & (t < MAX_RAY_DISTANCE)
    t[~active] = np.nan
    idx = np.flatnonzero(active)
    for _ in range(NEWTON_ITERATIONS):
        if len(idx) == 0:
            break
        p = origin + t[idx, None] * directions[idx]
        f = p[:, 2] - surface.height(p[:, 0], p[:, 1])
        hx, hy = surface.gradient(p[:, 0], p[:, 1])
        df = directions[idx, 2] - hx * directions[idx, 0] - hy * directions[idx, 1]
        t[idx] -= f / df
        idx = idx[np.abs(f) > 1e-12]
    hit = np.isfinite(t) & (t > 0) & (t < MAX_RAY_DISTANCE)
    t[~hit] = np.nan
    return t


def render_view(
    surface: AnalyticSurface, texture: RoadTexture, pose: Pose, cam: CameraModel
) -> Tuple[np.ndarray, np.ndarray]:
    """Clean RGB and label image of one camera by ray casting"""
    world = camera_pose_world(pose, cam)
    v, u = np.mgrid[0:cam.height, 0:cam.width]
    rays = np.stack(
        [(u.ravel() - cam.cx) / cam.fx, (v.ravel() - cam.cy) / cam.fy, np.ones(u.size)], axis=1
    )
    directions = rays @ world.rotation.T
    t = intersect_surface(surface, world.translation, directions)
    hit = np.isfinite(t)

    colors = np.tile(BASE_COLORS[SKY], (u.size, 1))
    labels = np.full(u.size, SKY, dtype=np.uint8)
    points = world.translation + t[hit, None] * directions[hit]
    colors[hit], labels[hit] = texture.sample(points[:, :2])
    return colors.reshape(cam.height, cam.width, 3), labels.reshape(cam.height, cam.width)


def apply_exposure(rgb: np.ndarray, a: float, b: float) -> np.ndarray:
    return np.clip(np.exp(a) * rgb + b, 0.0, 1.0)


@dataclass
class SyntheticScene:
    """A generated scene, ready to be written as a scene directory"""

    spec: SyntheticSpec
    manifest: SceneManifest
    cameras: Dict[str, CameraModel]
    poses: Dict[str, Pose]
    frames: List[Frame]
    clouds: Dict[str, PointCloud]
    gt: GroundTruthBev
    gt_elevation: np.ndarray
    exposure: Dict[str, Tuple[float, float]]
    surface: AnalyticSurface = field(repr=False, default=None)
    texture: RoadTexture = field(repr=False, default=None)

    def write(self, out_dir: Union[str, Path]) -> Path:
        from roadsplat.storage.bev_export import write_ground_truth
        from roadsplat.storage.scene_directory import ANALYTIC_GT_DIR, SceneDirectory

        out_dir = Path(out_dir)
        SceneDirectory(out_dir, self.manifest, self.cameras, self.poses, self.frames, self.clouds).write()
        gt_dir = write_ground_truth(out_dir / ANALYTIC_GT_DIR, self.gt, self.gt_elevation)
        (gt_dir / "exposure.json").write_text(
            json.dumps({k: list(v) for k, v in sorted(self.exposure.items())}, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        (gt_dir / "spec.json").write_text(
            json.dumps(self.spec.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        logger.info("Synthetic scene written", extra={"out_dir": str(out_dir), "frames": len(self.frames)})
        return out_dir


def load_spec(path: Union[str, Path]) -> SyntheticSpec:
    """Parse a JSON spec file; InvalidSpec names the line or the failing fields"""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise InvalidSpec(f"cannot read spec: {e}", {"path": str(path)})
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise InvalidSpec(f"spec is not valid JSON: {e.msg}", {"path": str(path), "line": e.lineno, "column": e.colno})
    try:
        return SyntheticSpec.model_validate(data)
    except ValidationError as e:
        errors = e.errors()
        fields = [".".join(str(p) for p in err["loc"]) or "<root>" for err in errors]
        message = f"invalid spec field {fields[0]}: {errors[0]['msg']}"
        raise InvalidSpec(message, {"path": str(path), "fields": fields})


def _exposures(spec: SyntheticSpec, camera_ids: List[str]) -> Dict[str, Tuple[float, float]]:
    """Injected (a, b) per camera; the first sorted camera is left uncorrupted
    so the recovered exposures share its gauge"""
    corruption = spec.exposure_corruption
    if corruption.values is not None:
        return {cid: (float(a), float(b)) for cid, (a, b) in zip(camera_ids, corruption.values)}
    rng = np.random.default_rng([spec.seed, 1])
    a = rng.uniform(*corruption.a_range, size=len(camera_ids))
    b = rng.uniform(*corruption.b_range, size=len(camera_ids))
    exposure = {cid: (float(a[i]), float(b[i])) for i, cid in enumerate(camera_ids)}
    if exposure:
        exposure[min(camera_ids)] = (0.0, 0.0)
    return exposure


def _lidar_sweeps(
    spec: SyntheticSpec, surface: AnalyticSurface, poses: Dict[str, Pose]
) -> Dict[str, PointCloud]:
    """Surface samples within range of the trajectory, each assigned to the
    nearest pose and stored in that pose's vehicle frame"""
    lidar = spec.lidar
    rng = np.random.default_rng([spec.seed, 2])
    frame_ids = list(poses)
    pose_xy = np.array([poses[f].translation[:2] for f in frame_ids])
    lo = pose_xy.min(axis=0) - lidar.range
    hi = pose_xy.max(axis=0) + lidar.range
    count = int(round(lidar.density * float(np.prod(hi - lo))))
    xy = lo + rng.uniform(size=(count, 2)) * (hi - lo)
    noise = rng.normal(0.0, lidar.noise_sigma, size=count) if lidar.noise_sigma > 0 else np.zeros(count)
    distance, owner = cKDTree(pose_xy).query(xy)
    keep = distance <= lidar.range
    points = np.column_stack([xy, surface.height(xy[:, 0], xy[:, 1]) + noise])[keep]
    owner = owner[keep]
    sweeps = {}
    for index, frame_id in enumerate(frame_ids):
        pose = poses[frame_id]
        local = pose.inverse().apply(points[owner == index])
        sweeps[frame_id] = PointCloud(local, timestamp=pose.timestamp)
    return sweeps


def _ground_truth(
    spec: SyntheticSpec, surface: AnalyticSurface, texture: RoadTexture, poses: List[Pose]
) -> Tuple[GroundTruthBev, np.ndarray]:
    layout = build_layout(poses, spec.gt_resolution, spec.gt_expand, class_count=len(spec.classes))
    grid = bev_grid_for(layout, spec.gt_resolution)
    xs, ys = grid.pixel_centers()
    xy = np.column_stack([xs.ravel(), ys.ravel()])
    colors, labels = texture.sample(xy)
    valid = layout.road_mask.reshape(-1) & np.isin(labels, np.asarray(spec.road_classes))
    # float32 so the stored points agree exactly with the elevation TIFF
    heights = surface.height(xy[:, 0], xy[:, 1]).astype(np.float32).astype(np.float64)

    label_map = np.where(valid, labels, VOID_LABEL).astype(np.uint8).reshape(grid.shape)
    elevation = np.where(valid, heights, np.nan).reshape(grid.shape)
    points = np.column_stack([xy[valid], heights[valid]])
    gt = GroundTruthBev(
        grid=grid,
        rgb=colors.reshape(grid.shape + (3,)),
        labels=label_map,
        valid_mask=valid.reshape(grid.shape),
        elevation=points,
        class_count=len(spec.classes),
    )
    return gt, elevation


@log_performance(logger)
def generate(spec: SyntheticSpec, seed: Optional[int] = None, threads: Optional[int] = None) -> SyntheticScene:
    """Build poses, images, label maps, LiDAR sweeps and analytic ground truth"""
    if seed is not None:
        spec = spec.model_copy(update={"seed": int(seed)})
    trajectory = Trajectory(spec.trajectory)
    positions = trajectory.frame_positions()
    if len(positions) < 2:
        raise InvalidSpec("trajectory yields fewer than two frames", {"fields": ["trajectory"]})

    surface = AnalyticSurface(spec.surface, spec.texture.half_width)
    margin = spec.gt_expand + MAX_RAY_DISTANCE
    centerline = Centerline(trajectory, margin)
    path_xy = trajectory.point(positions)
    reach = spec.gt_expand + spec.texture.half_width + 5.0
    noise = ValueNoise(
        path_xy.min(axis=0) - reach,
        path_xy.max(axis=0) + reach,
        spec.texture.noise_scale,
        np.random.default_rng([spec.seed, 0]),
    )
    texture = RoadTexture(spec, centerline, noise)

    headings = trajectory.heading(positions)
    frame_rate = spec.trajectory.frame_rate
    poses = {
        f"{k:06d}": surface_pose(surface, path_xy[k], float(headings[k]), k / frame_rate)
        for k in range(len(positions))
    }
    cameras = camera_rig(spec.cameras)
    camera_ids = list(cameras)
    exposure = _exposures(spec, camera_ids)

    jobs = [(frame_id, cid) for frame_id in poses for cid in camera_ids]

    def run(job):
        frame_id, cid = job
        rgb, labels = render_view(surface, texture, poses[frame_id], cameras[cid])
        a, b = exposure[cid]
        image = LabeledImage.from_labels(apply_exposure(rgb, a, b), labels, spec.road_classes, cid, frame_id)
        return Frame(image, poses[frame_id])

    workers = max(1, threads or settings.THREADS)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        frames = list(
            tqdm(pool.map(run, jobs), total=len(jobs), desc="synth", disable=not settings.PROGRESS_BARS)
        )

    clouds = _lidar_sweeps(spec, surface, poses) if spec.lidar.enabled else {}
    gt, gt_elevation = _ground_truth(spec, surface, texture, list(poses.values()))
    manifest = SceneManifest(
        name=spec.name, cameras=camera_ids, classes=spec.classes, road_classes=spec.road_classes
    )
    logger.info(
        "Synthetic scene generated",
        extra={
            "scene": spec.name,
            "seed": spec.seed,
            "poses": len(poses),
            "images": len(frames),
            "lidar_points": int(sum(len(c) for c in clouds.values())),
        },
    )
    return SyntheticScene(
        spec=spec,
        manifest=manifest,
        cameras=cameras,
        poses=poses,
        frames=frames,
        clouds=clouds,
        gt=gt,
        gt_elevation=gt_elevation,
        exposure=exposure,
        surface=surface,
        texture=texture,
    )
