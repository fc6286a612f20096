"""
Pydantic data models for roadsplat
Configuration records, on-disk file records and evaluation reports
"""

from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from config.constants import (
    DEFAULT_CLASSES,
    DEFAULT_ROAD_CLASSES,
    LAMBDA_COLOR,
    LAMBDA_ELEVATION,
    LAMBDA_SEMANTIC,
    LAMBDA_SMOOTH,
    LAMBDA_SMOOTH_LIDAR,
    LR_ALPHA,
    LR_COLOR,
    LR_EXPOSURE,
    LR_ROTATION,
    LR_SCALE,
    LR_SEMANTICS,
    LR_Z_END,
    LR_Z_START,
    SCENE_FORMAT_VERSION,
)


class Layout(str, Enum):
    """Surfel placement on the lattice"""

    ONE = "1"  # one surfel per masked vertex
    TWO = "2"  # vertices plus cell centers (quincunx)


class InitMode(str, Enum):
    """Pose-based initialization mode"""

    FULL = "full"
    Z_ONLY = "z_only"
    NONE = "none"


class CameraKind(str, Enum):
    PERSPECTIVE = "perspective"
    ORTHOGRAPHIC = "orthographic"


class Direction(str, Enum):
    UP = "up"
    DOWN = "down"
    LEFT = "left"
    RIGHT = "right"


class SurfaceKind(str, Enum):
    PLANE = "plane"
    INCLINED = "inclined"
    BUMPS = "bumps"
    CROWNED = "crowned"


class TrajectoryKind(str, Enum):
    STRAIGHT = "straight"
    ARC = "arc"
    S_CURVE = "s_curve"


class ErrorDetail(BaseModel):
    """Error detail model"""

    code: str = Field(..., description="Error code")
    message: str = Field(..., description="Error message")
    details: Optional[Dict[str, Any]] = Field(
        None, description="Additional error details"
    )


# Scene directory records


class ClassSpec(BaseModel):
    """One semantic class of the palette"""

    id: int = Field(..., ge=0, le=254, description="Class id stored in label maps")
    name: str = Field(..., description="Human-readable class name")
    color: Tuple[int, int, int] = Field(..., description="Palette color (RGB, 0-255)")


def default_classes() -> List[ClassSpec]:
    return [ClassSpec(id=i, name=n, color=c) for i, n, c in DEFAULT_CLASSES]


class SceneManifest(BaseModel):
    """manifest.json of a scene directory"""

    version: int = Field(default=SCENE_FORMAT_VERSION)
    name: str = Field(..., description="Scene name, used to sort report rows")
    cameras: List[str] = Field(..., min_length=1, description="Camera ids")
    classes: List[ClassSpec] = Field(default_factory=default_classes)
    road_classes: List[int] = Field(default_factory=lambda: list(DEFAULT_ROAD_CLASSES))

    @field_validator("version")
    @classmethod
    def validate_version(cls, v: int) -> int:
        if v != SCENE_FORMAT_VERSION:
            raise ValueError(f"unsupported scene format version {v}")
        return v

    @model_validator(mode="after")
    def validate_classes(self) -> "SceneManifest":
        ids = [c.id for c in self.classes]
        if ids != list(range(len(ids))):
            raise ValueError("class ids must be 0..C-1 in order")
        unknown = [c for c in self.road_classes if c not in ids]
        if unknown:
            raise ValueError(f"road_classes reference unknown classes {unknown}")
        if len(set(self.cameras)) != len(self.cameras):
            raise ValueError("camera ids must be unique")
        return self

    @property
    def class_count(self) -> int:
        return len(self.classes)

    @property
    def palette(self) -> List[Tuple[int, int, int]]:
        return [c.color for c in self.classes]


class PoseRecord(BaseModel):
    rotation: List[List[float]] = Field(..., description="3x3 row-major rotation")
    translation: List[float] = Field(..., min_length=3, max_length=3)


class CameraRecord(BaseModel):
    """One entry of cameras.json"""

    camera_id: str
    kind: CameraKind = CameraKind.PERSPECTIVE
    fx: float = Field(default=0.0, ge=0)
    fy: float = Field(default=0.0, ge=0)
    cx: float
    cy: float
    width: int = Field(..., gt=0)
    height: int = Field(..., gt=0)
    extrinsic: PoseRecord = Field(..., description="Camera pose in the vehicle frame")
    exposure_a: float = 0.0
    exposure_b: float = 0.0
    ortho_scale: float = Field(default=0.0, ge=0)

    @model_validator(mode="after")
    def validate_kind(self) -> "CameraRecord":
        if self.kind == CameraKind.PERSPECTIVE and (self.fx <= 0 or self.fy <= 0):
            raise ValueError("perspective cameras need fx, fy > 0")
        if self.kind == CameraKind.ORTHOGRAPHIC and self.ortho_scale <= 0:
            raise ValueError("orthographic cameras need ortho_scale > 0")
        return self


class BevGridRecord(BaseModel):
    """Sidecar describing a BEV raster"""

    origin_x: float = Field(..., description="World x of the center of pixel (0, 0)")
    origin_y: float = Field(..., description="World y of the center of pixel (0, 0)")
    resolution: float = Field(..., gt=0, description="Meters per pixel")
    width: int = Field(..., gt=0)
    height: int = Field(..., gt=0)
    units: str = "meters"


# Training configuration


class LossWeights(BaseModel):
    """Weights of the total training objective"""

    lambda_c: float = Field(default=LAMBDA_COLOR, ge=0)
    lambda_s: float = Field(default=LAMBDA_SEMANTIC, ge=0)
    lambda_smooth: float = Field(default=LAMBDA_SMOOTH, ge=0)
    lambda_smooth_lidar: float = Field(
        default=LAMBDA_SMOOTH_LIDAR,
        ge=0,
        description="Replaces lambda_smooth when LiDAR supervision is active",
    )
    lambda_z: float = Field(default=LAMBDA_ELEVATION, ge=0)

    def smooth_weight(self, use_lidar: bool) -> float:
        return self.lambda_smooth_lidar if use_lidar else self.lambda_smooth


class TrainConfig(BaseModel):
    """Optimizer and schedule configuration"""

    model_config = ConfigDict(extra="forbid")

    lr_alpha: float = Field(default=LR_ALPHA, ge=0)
    lr_scale: float = Field(default=LR_SCALE, ge=0)
    lr_rot: float = Field(default=LR_ROTATION, ge=0)
    lr_z_start: float = Field(default=LR_Z_START, ge=0)
    lr_z_end: float = Field(default=LR_Z_END, ge=0)
    lr_color: float = Field(default=LR_COLOR, ge=0)
    lr_semantics: float = Field(default=LR_SEMANTICS, ge=0)
    lr_exposure: float = Field(default=LR_EXPOSURE, ge=0)
    epochs: int = Field(default=1, ge=0)
    adam_beta1: float = Field(default=0.9, ge=0, lt=1)
    adam_beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-15, gt=0)
    seed: int = 0
    shuffle: bool = True
    use_lidar: bool = False
    lidar_radius: float = Field(default=0.1, gt=0)
    scale_lr_z_by_extent: bool = True
    elevation_reduction: Literal["sum", "mean"] = Field(
        default="sum",
        description="Sum over matched surfels, or their mean",
    )
    fix_reference_exposure: bool = Field(
        default=True,
        description="Hold the first camera's exposure fixed to anchor the exposure gauge",
    )
    weights: LossWeights = Field(default_factory=LossWeights)

    @model_validator(mode="after")
    def validate_schedule(self) -> "TrainConfig":
        if self.lr_z_end > self.lr_z_start:
            raise ValueError("lr_z_end must not exceed lr_z_start")
        if self.lr_z_end == 0 and self.lr_z_start > 0:
            raise ValueError("lr_z_end must be > 0 for an exponential schedule")
        return self


# Synthetic scene specification


class SurfaceSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: SurfaceKind = SurfaceKind.PLANE
    height: float = Field(default=0.0, description="Base elevation (m)")
    slope_x: float = Field(default=0.0, description="dz/dx of an inclined plane")
    slope_y: float = Field(default=0.0, description="dz/dy of an inclined plane")
    amplitude: float = Field(default=0.1, ge=0, description="Bump amplitude (m)")
    wavelength: float = Field(default=10.0, gt=0, description="Bump wavelength (m)")
    crown: float = Field(default=0.1, ge=0, description="Crown drop at the road edge (m)")
    crown_center_y: float = Field(default=0.0, description="World y of the crown axis")

    @model_validator(mode="after")
    def validate_slopes(self) -> "SurfaceSpec":
        if abs(self.slope_x) >= 1.0 or abs(self.slope_y) >= 1.0:
            raise ValueError("slopes must stay below 45 degrees")
        return self


class TextureSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lanes: int = Field(default=2, ge=1)
    lane_width: float = Field(default=3.5, gt=0)
    line_width: float = Field(default=0.15, gt=0)
    dash_length: float = Field(default=3.0, gt=0)
    dash_gap: float = Field(default=3.0, ge=0)
    curb_width: float = Field(default=0.5, ge=0)
    zebra_at: List[float] = Field(
        default_factory=lambda: [15.0], description="Arc-length positions of crossings"
    )
    zebra_length: float = Field(default=4.0, gt=0)
    zebra_stripe: float = Field(default=0.5, gt=0)
    stop_line_width: float = Field(default=0.4, ge=0)
    noise_amplitude: float = Field(default=0.04, ge=0)
    noise_scale: float = Field(default=1.5, gt=0, description="Noise cell size (m)")

    @property
    def half_width(self) -> float:
        return self.lanes * self.lane_width / 2.0


class TrajectorySpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: TrajectoryKind = TrajectoryKind.STRAIGHT
    length: float = Field(default=30.0, gt=0, description="Path length (m)")
    speed: float = Field(default=5.0, gt=0, description="m/s")
    frame_rate: float = Field(default=2.0, gt=0, description="Hz")
    start: Tuple[float, float] = (0.0, 0.0)
    heading: float = Field(default=0.0, description="Initial heading (rad)")
    radius: float = Field(default=40.0, gt=0, description="Arc radius (m)")
    amplitude: float = Field(default=2.0, ge=0, description="S-curve lateral amplitude (m)")


class CameraRigSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    count: int = Field(default=6, ge=1)
    fov_deg: float = Field(default=90.0, gt=10, lt=170)
    width: int = Field(default=96, gt=0)
    height: int = Field(default=64, gt=0)
    mount_height: float = Field(default=1.6, gt=0)
    mount_radius: float = Field(default=1.0, ge=0)
    pitch_deg: float = Field(default=30.0, ge=0, lt=90, description="Downward tilt")

    @model_validator(mode="after")
    def validate_horizon(self) -> "CameraRigSpec":
        import math

        vfov = 2.0 * math.degrees(
            math.atan(math.tan(math.radians(self.fov_deg) / 2.0) * self.height / self.width)
        )
        if self.pitch_deg + vfov / 2.0 >= 89.0:
            raise ValueError("lower image edge would look behind the camera")
        return self


class ExposureSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    a_range: Tuple[float, float] = (-0.2, 0.2)
    b_range: Tuple[float, float] = (-0.05, 0.05)
    values: Optional[List[Tuple[float, float]]] = Field(
        None, description="Explicit per-camera (a, b); overrides the ranges"
    )

    @model_validator(mode="after")
    def validate_ranges(self) -> "ExposureSpec":
        for lo, hi in (self.a_range, self.b_range):
            if lo > hi:
                raise ValueError("exposure range lower bound exceeds upper bound")
        return self


class LidarSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    density: float = Field(default=20.0, gt=0, description="Points per square meter")
    noise_sigma: float = Field(default=0.0, ge=0, description="z noise (m)")
    range: float = Field(default=15.0, gt=0, description="Sweep radius (m)")


class SyntheticSpec(BaseModel):
    """A procedural road scene with known texture, semantics and elevation"""

    model_config = ConfigDict(extra="forbid")

    name: str = "synthetic"
    seed: int = 0
    surface: SurfaceSpec = Field(default_factory=SurfaceSpec)
    texture: TextureSpec = Field(default_factory=TextureSpec)
    trajectory: TrajectorySpec = Field(default_factory=TrajectorySpec)
    cameras: CameraRigSpec = Field(default_factory=CameraRigSpec)
    exposure_corruption: ExposureSpec = Field(default_factory=ExposureSpec)
    lidar: LidarSpec = Field(default_factory=LidarSpec)
    classes: List[ClassSpec] = Field(default_factory=default_classes)
    road_classes: List[int] = Field(default_factory=lambda: list(DEFAULT_ROAD_CLASSES))
    gt_resolution: float = Field(default=0.05, gt=0)
    gt_expand: float = Field(default=10.0, ge=0)

    @model_validator(mode="after")
    def validate_spec(self) -> "SyntheticSpec":
        if len(self.classes) != len(DEFAULT_CLASSES):
            raise ValueError(
                f"synthetic texture needs the {len(DEFAULT_CLASSES)} default classes"
            )
        values = self.exposure_corruption.values
        if values is not None and len(values) != self.cameras.count:
            raise ValueError("exposure values must list one (a, b) pair per camera")
        if self.trajectory.kind == TrajectoryKind.ARC:
            if self.trajectory.length > 1.5 * 3.141592653589793 * self.trajectory.radius:
                raise ValueError("arc trajectory would overlap itself")
        return self


# Run records


class StepRecord(BaseModel):
    """Loss components of one optimizer step"""

    step: int
    epoch: int
    camera_id: str
    frame_id: str
    L_c: float
    L_s: float
    L_smooth: float
    L_z: float
    total: float
    lr_z: float


class EpochSnapshot(BaseModel):
    epoch: int
    steps: int
    mean_total: float
    skipped_frames: int = 0
    psnr: Optional[float] = None
    miou: Optional[float] = None
    elevation_rmse: Optional[float] = None


class EvaluationRow(BaseModel):
    scene: str
    psnr: float
    miou: float
    elevation_rmse: Optional[float] = Field(
        None, description="None when no surfel matched a GT point"
    )
    matched_fraction: float = 0.0
    coverage: float = 0.0


class EvaluationReport(BaseModel):
    rows: List[EvaluationRow]
    mean: EvaluationRow


class RunManifest(BaseModel):
    """Reproducibility record written next to every reconstruction"""

    command: str
    seed: int
    config: Dict[str, Any]
    options: Dict[str, Any]
    git_revision: Optional[str] = None
    input_hashes: Dict[str, str] = Field(default_factory=dict)
    version: str


class ReconstructOptions(BaseModel):
    """Pipeline options of a reconstruction run besides the training config"""

    model_config = ConfigDict(extra="forbid")

    resolution: float = Field(default=0.05, gt=0, description="Lattice and BEV resolution (m/pixel)")
    layout: Layout = Layout.ONE
    init_mode: InitMode = InitMode.FULL
    expand: float = Field(default=10.0, ge=0, description="Road mask radius around the trajectory (m)")
    threads: int = Field(default=4, ge=1)
    stop_at_step: Optional[int] = Field(default=None, ge=0)
    init_appearance: bool = Field(
        default=True,
        description="Seed colors, semantics and exposures from the input frames",
    )
    seed_from_lidar: bool = Field(
        default=True,
        description="Seed elevations from the point cloud when LiDAR supervision is on",
    )
