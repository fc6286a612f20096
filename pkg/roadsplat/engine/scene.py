"""
Meshgrid of Gaussian surfels over the road mask.

Surfels sit on the vertices of a square lattice covering the dilated vehicle
trajectory (Layout 1), or on the vertices plus fully enclosed cell centers
(Layout 2, a quincunx stored on a half-step lattice). The lattice image maps
each cell to its surfel index so neighbor queries are array lookups.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from config.constants import DEFAULT_CLASSES, INITIAL_COLOR, INITIAL_OPACITY
from roadsplat.core.exceptions import DegenerateExtent, EmptyScene
from roadsplat.core.logging import get_logger, log_performance
from roadsplat.engine.geometry import Pose, quaternion_to_matrix
from roadsplat.models import BevGridRecord, Direction, Layout

logger = get_logger(__name__)

EMPTY = -1

PARAMETER_CLASSES = ("z", "log_scale", "logit_opacity", "quaternion", "color", "semantics")

# (row, col) lattice steps. Rows grow with world y, columns with world x.
# Layout 2 uses the quincunx's diagonal steps so vertices and centers couple.
_DIRECTION_OFFSETS = {
    Layout.ONE: {
        Direction.UP: (1, 0),
        Direction.DOWN: (-1, 0),
        Direction.LEFT: (0, -1),
        Direction.RIGHT: (0, 1),
    },
    Layout.TWO: {
        Direction.UP: (1, 1),
        Direction.DOWN: (-1, -1),
        Direction.LEFT: (1, -1),
        Direction.RIGHT: (-1, 1),
    },
}


@dataclass
class GaussianSurfel:
    """A single surfel with activated parameters"""

    center: np.ndarray
    color: np.ndarray
    scale: np.ndarray
    opacity: float
    rotation: np.ndarray
    semantics: np.ndarray


def covariance_3d(surfel: GaussianSurfel) -> np.ndarray:
    """R diag(sx^2, sy^2, 0) R^T; rank 2 by construction"""
    return covariance_3d_batch(surfel.rotation[None, :], surfel.scale[None, :])[0]


def covariance_3d_batch(quaternions: np.ndarray, scales: np.ndarray) -> np.ndarray:
    rot = quaternion_to_matrix(quaternions)
    m = rot[:, :, :2] * scales[:, None, :]
    return m @ np.swapaxes(m, 1, 2)


@dataclass
class SurfelScene:
    """All surfel parameters plus the lattice they live on.

    Learnable arrays hold unconstrained values: log-scales, logit-opacities,
    raw quaternions and semantic logits. xy is fixed after construction.
    """

    xy: np.ndarray
    z: np.ndarray
    color: np.ndarray
    log_scale: np.ndarray
    logit_opacity: np.ndarray
    quaternion: np.ndarray
    semantics: np.ndarray
    cells: np.ndarray
    lattice: np.ndarray
    road_mask: np.ndarray
    grid_origin: np.ndarray
    grid_resolution: float
    layout: Layout = Layout.ONE
    class_palette: List[Tuple[int, int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.z)

    @property
    def surfel_count(self) -> int:
        return len(self.z)

    @property
    def class_count(self) -> int:
        return self.semantics.shape[1]

    @property
    def lattice_step(self) -> float:
        """Spacing of the lattice image; half the resolution for Layout 2"""
        return self.grid_resolution / 2.0 if self.layout == Layout.TWO else self.grid_resolution

    def centers(self) -> np.ndarray:
        return np.column_stack([self.xy, self.z])

    def opacity(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logit_opacity))

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def rotations(self) -> np.ndarray:
        return quaternion_to_matrix(self.quaternion)

    def covariances(self) -> np.ndarray:
        return covariance_3d_batch(self.quaternion, self.scales())

    def parameters(self) -> Dict[str, np.ndarray]:
        """Learnable arrays by parameter class (live references)"""
        return {name: getattr(self, name) for name in PARAMETER_CLASSES}

    def extent(self) -> Tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) of the lattice"""
        rows, cols = self.lattice.shape
        x0, y0 = self.grid_origin
        step = self.lattice_step
        return (float(x0), float(y0), float(x0 + (cols - 1) * step), float(y0 + (rows - 1) * step))

    def copy(self) -> "SurfelScene":
        return SurfelScene(
            xy=self.xy.copy(),
            z=self.z.copy(),
            color=self.color.copy(),
            log_scale=self.log_scale.copy(),
            logit_opacity=self.logit_opacity.copy(),
            quaternion=self.quaternion.copy(),
            semantics=self.semantics.copy(),
            cells=self.cells.copy(),
            lattice=self.lattice.copy(),
            road_mask=self.road_mask.copy(),
            grid_origin=self.grid_origin.copy(),
            grid_resolution=self.grid_resolution,
            layout=self.layout,
            class_palette=list(self.class_palette),
        )


@dataclass(frozen=True)
class BevGrid:
    """A top-down raster; pixel (r, c) centers on origin + (c, r) * resolution"""

    origin_x: float
    origin_y: float
    resolution: float
    width: int
    height: int

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    def to_record(self) -> BevGridRecord:
        return BevGridRecord(
            origin_x=self.origin_x,
            origin_y=self.origin_y,
            resolution=self.resolution,
            width=self.width,
            height=self.height,
        )

    @classmethod
    def from_record(cls, record: BevGridRecord) -> "BevGrid":
        return cls(record.origin_x, record.origin_y, record.resolution, record.width, record.height)

    def pixel_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """World (x, y) of every pixel center, each of shape (height, width)"""
        xs = self.origin_x + np.arange(self.width) * self.resolution
        ys = self.origin_y + np.arange(self.height) * self.resolution
        return np.meshgrid(xs, ys)

    def world_to_pixel(self, xy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Nearest (row, col) for world points, plus an in-bounds flag"""
        xy = np.asarray(xy, dtype=np.float64)
        col = np.rint((xy[:, 0] - self.origin_x) / self.resolution).astype(np.int64)
        row = np.rint((xy[:, 1] - self.origin_y) / self.resolution).astype(np.int64)
        inside = (col >= 0) & (col < self.width) & (row >= 0) & (row < self.height)
        return np.stack([row, col], axis=1), inside

    def windows(self, chunk: int) -> Iterator[Tuple[int, int, int, int]]:
        """(row0, row1, col0, col1) chunk windows in row-major order"""
        for r0 in range(0, self.height, chunk):
            for c0 in range(0, self.width, chunk):
                yield r0, min(r0 + chunk, self.height), c0, min(c0 + chunk, self.width)


def bev_grid_for(scene: SurfelScene, resolution: float) -> BevGrid:
    """BEV grid covering the scene lattice at the given resolution"""
    xmin, ymin, xmax, ymax = scene.extent()
    width = int(np.floor((xmax - xmin) / resolution + 1e-9)) + 1
    height = int(np.floor((ymax - ymin) / resolution + 1e-9)) + 1
    return BevGrid(xmin, ymin, resolution, width, height)


def dilate_disk(image: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation by a Euclidean disk of `radius` cells"""
    seeds = np.asarray(image) > 0
    if radius <= 0:
        return seeds
    # distance to the nearest seed pixel; exact Euclidean with the precise mask
    inverted = np.where(seeds, 0, 255).astype(np.uint8)
    distance = cv2.distanceTransform(inverted, cv2.DIST_L2, cv2.DIST_MASK_PRECISE)
    return distance <= radius


def rasterize_trajectory(pixels: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Draw the polyline through (col, row) pixels onto a uint8 image"""
    image = np.zeros(shape, dtype=np.uint8)
    for a, b in zip(pixels[:-1], pixels[1:]):
        cv2.line(image, (int(a[0]), int(a[1])), (int(b[0]), int(b[1])), 1, 1)
    image[pixels[:, 1], pixels[:, 0]] = 1
    return image


def _quincunx(mask: np.ndarray) -> np.ndarray:
    rows, cols = mask.shape
    dense = np.zeros((2 * rows - 1, 2 * cols - 1), dtype=bool)
    dense[::2, ::2] = mask
    dense[1::2, 1::2] = mask[:-1, :-1] & mask[1:, :-1] & mask[:-1, 1:] & mask[1:, 1:]
    return dense


@log_performance(logger)
def build_layout(
    poses: Sequence[Pose],
    resolution: float,
    expand: float = 10.0,
    layout: Layout = Layout.ONE,
    class_count: int = len(DEFAULT_CLASSES),
    palette: Optional[List[Tuple[int, int, int]]] = None,
) -> SurfelScene:
    """Surfel meshgrid over the trajectory dilated by `expand` meters"""
    if not poses:
        raise EmptyScene("no poses to build a layout from")
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if expand < 0:
        raise ValueError("expand must be non-negative")
    layout = Layout(layout)

    xy = np.array([p.translation[:2] for p in poses], dtype=np.float64)
    lo = xy.min(axis=0) - expand
    hi = xy.max(axis=0) + expand
    span = hi - lo
    if np.any(span < resolution):
        raise DegenerateExtent(
            "trajectory bounding box collapses below one cell",
            {"span": span.tolist(), "resolution": resolution},
        )

    cols = int(np.ceil(span[0] / resolution - 1e-9)) + 1
    rows = int(np.ceil(span[1] / resolution - 1e-9)) + 1
    pixels = np.rint((xy - lo) / resolution).astype(np.int32)
    trajectory = rasterize_trajectory(pixels, (rows, cols))
    radius = int(np.ceil(expand / resolution - 1e-9))
    mask = dilate_disk(trajectory, radius)

    if layout == Layout.TWO:
        mask = _quincunx(mask)
        step = resolution / 2.0
    else:
        step = resolution

    cells = np.argwhere(mask)
    count = len(cells)
    lattice = np.full(mask.shape, EMPTY, dtype=np.int64)
    lattice[cells[:, 0], cells[:, 1]] = np.arange(count)

    opacity_logit = np.log(INITIAL_OPACITY / (1.0 - INITIAL_OPACITY))
    quaternion = np.zeros((count, 4))
    quaternion[:, 0] = 1.0
    scene = SurfelScene(
        xy=lo + cells[:, ::-1].astype(np.float64) * step,
        z=np.zeros(count),
        color=np.full((count, 3), INITIAL_COLOR),
        log_scale=np.full((count, 2), np.log(resolution)),
        logit_opacity=np.full(count, opacity_logit),
        quaternion=quaternion,
        semantics=np.zeros((count, class_count)),
        cells=cells.astype(np.int64),
        lattice=lattice,
        road_mask=mask,
        grid_origin=lo.copy(),
        grid_resolution=float(resolution),
        layout=layout,
        class_palette=list(palette) if palette else [c for _, _, c in DEFAULT_CLASSES][:class_count],
    )
    logger.info(
        "Layout built",
        extra={
            "layout": layout.value,
            "surfels": count,
            "lattice_shape": list(mask.shape),
            "resolution": resolution,
        },
    )
    return scene


def neighbor_indices(scene: SurfelScene, direction: Direction) -> np.ndarray:
    """Index of the adjacent surfel in `direction`; own index where none exists"""
    dr, dc = _DIRECTION_OFFSETS[scene.layout][Direction(direction)]
    rows, cols = scene.lattice.shape
    r = scene.cells[:, 0] + dr
    c = scene.cells[:, 1] + dc
    own = np.arange(scene.surfel_count)
    inside = (r >= 0) & (r < rows) & (c >= 0) & (c < cols)
    result = own.copy()
    found = scene.lattice[r[inside], c[inside]]
    result[inside] = np.where(found != EMPTY, found, own[inside])
    return result


def neighbor_table(scene: SurfelScene) -> np.ndarray:
    """(4, N) neighbor indices in up, down, left, right order"""
    return np.stack([neighbor_indices(scene, d) for d in Direction])


def direction_offset(layout: Layout, direction: Direction) -> Tuple[int, int]:
    return _DIRECTION_OFFSETS[Layout(layout)][Direction(direction)]
