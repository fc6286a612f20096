"""
Scene directory reader and writer.

    <root>/manifest.json            SceneManifest
    <root>/poses.txt                frame_id timestamp tx ty tz + rotation (9 row-major or qw qx qy qz)
    <root>/cameras.json             list of CameraRecord
    <root>/images/<cam>/<frame>.png RGB
    <root>/labels/<cam>/<frame>.png 8-bit class ids
    <root>/clouds/<frame>.npy       optional LiDAR sweep, vehicle frame, N x 3
    <root>/analytic_gt/             optional ground-truth BEV layers
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from PIL import Image
from pydantic import ValidationError

from roadsplat.core.exceptions import InvalidPose, SceneDirectoryError
from roadsplat.core.logging import get_logger, log_performance
from roadsplat.engine.evaluation import CloudFrame
from roadsplat.engine.geometry import CameraModel, Frame, LabeledImage, PointCloud, Pose
from roadsplat.models import CameraRecord, SceneManifest

logger = get_logger(__name__)

MANIFEST_FILE = "manifest.json"
POSES_FILE = "poses.txt"
CAMERAS_FILE = "cameras.json"
IMAGES_DIR = "images"
LABELS_DIR = "labels"
CLOUDS_DIR = "clouds"
ANALYTIC_GT_DIR = "analytic_gt"


def _fmt(value: float) -> str:
    return repr(float(value))


def read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def write_rgb(path: Path, rgb: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def read_labels(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("L", "P"):
            raise SceneDirectoryError("label maps must be 8-bit single channel", {"path": str(path)})
        return np.asarray(img, dtype=np.uint8)


def write_labels(path: Path, labels: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path, format="PNG")


def parse_poses(text: str, source: str = POSES_FILE) -> Dict[str, Pose]:
    """frame_id -> Pose, in file order"""
    poses: Dict[str, Pose] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            values = [float(v) for v in parts[1:]]
        except ValueError:
            raise SceneDirectoryError("non-numeric pose value", {"file": source, "line": number})
        if len(values) not in (1 + 3 + 9, 1 + 3 + 4):
            raise SceneDirectoryError(
                "pose line needs timestamp, translation and 9 or 4 rotation values",
                {"file": source, "line": number, "values": len(values)},
            )
        timestamp, translation, rotation = values[0], values[1:4], values[4:]
        try:
            if len(rotation) == 9:
                pose = Pose(np.array(rotation).reshape(3, 3), translation, timestamp)
            else:
                q = np.array(rotation)
                if not np.isclose(np.linalg.norm(q), 1.0, atol=1e-6):
                    raise InvalidPose("quaternion is not unit length")
                pose = Pose.from_quaternion(q, translation, timestamp)
        except InvalidPose as e:
            e.details.update({"file": source, "line": number})
            raise
        if parts[0] in poses:
            raise SceneDirectoryError("duplicate frame id", {"file": source, "line": number, "frame": parts[0]})
        poses[parts[0]] = pose
    return poses


def format_poses(poses: Dict[str, Pose]) -> str:
    lines = ["# frame_id timestamp tx ty tz r00 r01 r02 r10 r11 r12 r20 r21 r22"]
    for frame_id, pose in poses.items():
        ts = pose.timestamp if pose.timestamp is not None else 0.0
        values = [ts, *pose.translation, *pose.rotation.reshape(-1)]
        lines.append(" ".join([frame_id] + [_fmt(v) for v in values]))
    return "\n".join(lines) + "\n"


@dataclass
class SceneDirectory:
    """A loaded scene: manifest, cameras, poses and the per-camera frames"""

    root: Path
    manifest: SceneManifest
    cameras: Dict[str, CameraModel]
    poses: Dict[str, Pose]
    frames: List[Frame] = field(default_factory=list)
    clouds: Dict[str, PointCloud] = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.manifest.name

    @property
    def has_clouds(self) -> bool:
        return bool(self.clouds)

    @property
    def analytic_gt_dir(self) -> Optional[Path]:
        path = self.root / ANALYTIC_GT_DIR
        return path if path.is_dir() else None

    def pose_list(self) -> List[Pose]:
        return list(self.poses.values())

    def cloud_frames(self) -> List[CloudFrame]:
        """Sweeps paired with their frame pose, in pose order"""
        return [CloudFrame(self.clouds[f], self.poses[f]) for f in self.poses if f in self.clouds]

    def merged_cloud(self) -> PointCloud:
        """All sweeps transformed to world and concatenated"""
        sweeps = [c.pose.apply(c.cloud.points) for c in self.cloud_frames()]
        points = np.concatenate(sweeps) if sweeps else np.zeros((0, 3))
        return PointCloud(points)

    @classmethod
    @log_performance(logger)
    def load(cls, root: Union[str, Path], load_clouds: bool = True) -> "SceneDirectory":
        root = Path(root)
        if not root.is_dir():
            raise SceneDirectoryError("scene directory does not exist", {"path": str(root)})
        manifest = _load_model(root / MANIFEST_FILE, SceneManifest.model_validate_json)

        cameras_path = root / CAMERAS_FILE
        records = _load_model(cameras_path, lambda text: [CameraRecord.model_validate(r) for r in json.loads(text)])
        cameras = {r.camera_id: CameraModel.from_record(r) for r in records}
        missing = sorted(set(manifest.cameras) - set(cameras))
        if missing:
            raise SceneDirectoryError("cameras.json lacks manifest cameras", {"cameras": missing})

        poses_path = root / POSES_FILE
        if not poses_path.is_file():
            raise SceneDirectoryError("missing poses file", {"path": str(poses_path)})
        poses = parse_poses(poses_path.read_text(encoding="utf-8"), str(poses_path))

        frames: List[Frame] = []
        for camera_id in manifest.cameras:
            image_dir = root / IMAGES_DIR / camera_id
            label_dir = root / LABELS_DIR / camera_id
            if not image_dir.is_dir():
                raise SceneDirectoryError("missing image folder", {"path": str(image_dir)})
            if not label_dir.is_dir():
                raise SceneDirectoryError("missing label folder", {"path": str(label_dir)})
            image_ids = {p.stem for p in image_dir.glob("*.png")}
            label_ids = {p.stem for p in label_dir.glob("*.png")}
            if image_ids != label_ids:
                raise SceneDirectoryError(
                    "images and labels do not pair one-to-one",
                    {"camera": camera_id, "unpaired": sorted(image_ids ^ label_ids)[:10]},
                )
            unknown = sorted(image_ids - set(poses))
            if unknown:
                raise SceneDirectoryError("images without a pose", {"camera": camera_id, "frames": unknown[:10]})
            cam = cameras[camera_id]
            for frame_id in poses:
                if frame_id not in image_ids:
                    continue
                rgb = read_rgb(image_dir / f"{frame_id}.png")
                labels = read_labels(label_dir / f"{frame_id}.png")
                if rgb.shape[:2] != (cam.height, cam.width) or labels.shape != rgb.shape[:2]:
                    raise SceneDirectoryError(
                        "image size does not match the camera",
                        {"camera": camera_id, "frame": frame_id, "shape": list(rgb.shape[:2])},
                    )
                image = LabeledImage.from_labels(rgb, labels, manifest.road_classes, camera_id, frame_id)
                frames.append(Frame(image, poses[frame_id]))

        clouds: Dict[str, PointCloud] = {}
        cloud_dir = root / CLOUDS_DIR
        if load_clouds and cloud_dir.is_dir():
            for path in sorted(cloud_dir.glob("*.npy")):
                if path.stem not in poses:
                    raise SceneDirectoryError("cloud without a pose", {"path": str(path)})
                points = np.load(path, allow_pickle=False)
                if points.ndim != 2 or points.shape[1] != 3:
                    raise SceneDirectoryError("clouds must be N x 3", {"path": str(path)})
                clouds[path.stem] = PointCloud(points, timestamp=poses[path.stem].timestamp)

        logger.info(
            "Scene directory loaded",
            extra={"scene": manifest.name, "frames": len(frames), "poses": len(poses), "clouds": len(clouds)},
        )
        return cls(root, manifest, cameras, poses, frames, clouds)

    def write(self, root: Optional[Union[str, Path]] = None) -> Path:
        """Write every component; frames are written as RGB and label PNGs"""
        root = Path(root) if root is not None else self.root
        root.mkdir(parents=True, exist_ok=True)
        (root / MANIFEST_FILE).write_text(
            json.dumps(self.manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        records = [self.cameras[c].to_record().model_dump(mode="json") for c in sorted(self.cameras)]
        (root / CAMERAS_FILE).write_text(json.dumps(records, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (root / POSES_FILE).write_text(format_poses(self.poses), encoding="utf-8")
        for frame in self.frames:
            cam_id, frame_id = frame.image.camera_id, frame.image.pose_id
            write_rgb(root / IMAGES_DIR / cam_id / f"{frame_id}.png", frame.image.rgb)
            write_labels(root / LABELS_DIR / cam_id / f"{frame_id}.png", frame.image.labels)
        for frame_id, cloud in self.clouds.items():
            path = root / CLOUDS_DIR / f"{frame_id}.npy"
            path.parent.mkdir(parents=True, exist_ok=True)
            np.save(path, np.ascontiguousarray(cloud.points, dtype="<f8"), allow_pickle=False)
        return root


def _load_model(path: Path, parse):
    if not path.is_file():
        raise SceneDirectoryError(f"missing {path.name}", {"path": str(path)})
    try:
        return parse(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        fields = [".".join(str(p) for p in err["loc"]) for err in e.errors()]
        raise SceneDirectoryError(f"invalid {path.name}", {"path": str(path), "fields": fields})
    except ValueError as e:
        raise SceneDirectoryError(f"malformed {path.name}: {e}", {"path": str(path)})
