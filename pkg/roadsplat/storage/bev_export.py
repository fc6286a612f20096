"""
BEV map files: RGB PNG, palette PNG of class ids, float32 elevation TIFF and a
JSON grid sidecar. The same layout stores analytic ground truth.
"""

import json
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from config.constants import VOID_LABEL
from roadsplat.core.exceptions import MissingGT
from roadsplat.core.logging import get_logger
from roadsplat.engine.evaluation import GroundTruthBev
from roadsplat.engine.rasterizer import BevMaps
from roadsplat.engine.scene import BevGrid
from roadsplat.models import BevGridRecord
from roadsplat.storage.scene_directory import read_rgb, write_labels, write_rgb

logger = get_logger(__name__)

RGB_FILE = "bev_rgb.png"
SEMANTIC_FILE = "bev_semantic.png"
LABELS_FILE = "bev_labels.png"
ELEVATION_FILE = "bev_elevation.tiff"
GRID_FILE = "bev_grid.json"
ELEVATION_POINTS_FILE = "elevation_points.npy"


def _palette_bytes(palette: Sequence[Tuple[int, int, int]]) -> List[int]:
    flat = [0] * 768
    for index, color in enumerate(palette[:VOID_LABEL]):
        flat[3 * index:3 * index + 3] = [int(c) for c in color]
    return flat


def write_semantic(path: Path, labels: np.ndarray, palette: Sequence[Tuple[int, int, int]]) -> None:
    """Class ids as a palette PNG; void pixels map to palette entry 255 (black)"""
    path.parent.mkdir(parents=True, exist_ok=True)
    image = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    image.putpalette(_palette_bytes(palette))
    image.save(path, format="PNG")


def read_index_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.uint8)


def write_elevation(path: Path, elevation: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(elevation, dtype=np.float32), mode="F").save(path, format="TIFF")


def read_elevation(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float64)


def write_grid(path: Path, grid: BevGrid) -> None:
    path.write_text(json.dumps(grid.to_record().model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_grid(path: Path) -> BevGrid:
    return BevGrid.from_record(BevGridRecord.model_validate_json(path.read_text(encoding="utf-8")))


def write_bev_maps(
    out_dir: Union[str, Path], maps: BevMaps, palette: Sequence[Tuple[int, int, int]]
) -> Dict[str, Path]:
    """Export rendered BEV layers; returns the written paths by layer"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "rgb": out_dir / RGB_FILE,
        "semantic": out_dir / SEMANTIC_FILE,
        "elevation": out_dir / ELEVATION_FILE,
        "grid": out_dir / GRID_FILE,
    }
    write_rgb(paths["rgb"], maps.rgb)
    write_semantic(paths["semantic"], maps.labels, palette)
    write_elevation(paths["elevation"], maps.elevation)
    write_grid(paths["grid"], maps.grid)
    logger.info("BEV maps exported", extra={"out_dir": str(out_dir), "height": maps.grid.height, "width": maps.grid.width})
    return paths


def read_bev_maps(out_dir: Union[str, Path]) -> BevMaps:
    """Maps written by write_bev_maps (or ground truth written by
    write_ground_truth); alpha is 1 where a label exists"""
    out_dir = Path(out_dir)
    semantic = out_dir / SEMANTIC_FILE
    labels = read_index_image(semantic if semantic.is_file() else out_dir / LABELS_FILE)
    return BevMaps(
        rgb=read_rgb(out_dir / RGB_FILE),
        labels=labels,
        elevation=read_elevation(out_dir / ELEVATION_FILE),
        alpha=(labels != VOID_LABEL).astype(np.float64),
        grid=read_grid(out_dir / GRID_FILE),
    )


def write_ground_truth(out_dir: Union[str, Path], gt: GroundTruthBev, elevation: np.ndarray) -> Path:
    """Store GT layers; `elevation` is the dense BEV elevation raster"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_rgb(out_dir / RGB_FILE, gt.rgb)
    write_labels(out_dir / LABELS_FILE, np.where(gt.valid_mask, gt.labels, VOID_LABEL))
    write_elevation(out_dir / ELEVATION_FILE, elevation)
    write_grid(out_dir / GRID_FILE, gt.grid)
    np.save(out_dir / ELEVATION_POINTS_FILE, np.ascontiguousarray(gt.elevation, dtype="<f8"), allow_pickle=False)
    return out_dir


def read_ground_truth(gt_dir: Union[str, Path], class_count: int) -> GroundTruthBev:
    """Ground truth stored by write_ground_truth; valid where a label exists"""
    gt_dir = Path(gt_dir)
    required = [RGB_FILE, LABELS_FILE, GRID_FILE, ELEVATION_POINTS_FILE]
    missing = [name for name in required if not (gt_dir / name).is_file()]
    if missing:
        raise MissingGT("ground-truth directory is incomplete", {"path": str(gt_dir), "missing": missing})
    labels = read_index_image(gt_dir / LABELS_FILE)
    valid = labels != VOID_LABEL
    return GroundTruthBev(
        grid=read_grid(gt_dir / GRID_FILE),
        rgb=read_rgb(gt_dir / RGB_FILE),
        labels=labels,
        valid_mask=valid,
        elevation=np.load(gt_dir / ELEVATION_POINTS_FILE, allow_pickle=False).reshape(-1, 3),
        class_count=class_count,
    )
