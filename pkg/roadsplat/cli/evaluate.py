"""
evaluate: checkpoints or exported BEV maps against ground truth
"""

import argparse
import json
from pathlib import Path
from typing import List, Optional, Sequence, Union

from config.constants import DEFAULT_CLASSES, DEFAULT_EXPAND, DEFAULT_RESOLUTION, ELEVATION_RADIUS
from roadsplat.cli.common import BEV_DIR
from roadsplat.core.exceptions import MissingGT
from roadsplat.core.logging import get_logger
from roadsplat.engine.evaluation import GroundTruthBev, build_gt, evaluate_maps, evaluate_scene, make_report
from roadsplat.engine.scene import bev_grid_for, build_layout
from roadsplat.models import EvaluationReport, EvaluationRow
from roadsplat.storage.bev_export import LABELS_FILE, read_bev_maps, read_ground_truth
from roadsplat.storage.checkpoint import checkpoint_load
from roadsplat.storage.scene_directory import MANIFEST_FILE, SceneDirectory

logger = get_logger(__name__)


def load_ground_truth(
    source: Union[str, Path],
    class_count: int = len(DEFAULT_CLASSES),
    resolution: float = DEFAULT_RESOLUTION,
    expand: float = DEFAULT_EXPAND,
) -> GroundTruthBev:
    """GT from an analytic_gt folder, or from a scene directory (its
    analytic_gt if present, otherwise built from its point clouds on the grid
    a reconstruction at `resolution` and `expand` exports)"""
    source = Path(source)
    if (source / LABELS_FILE).is_file():
        return read_ground_truth(source, class_count)
    if not (source / MANIFEST_FILE).is_file():
        raise MissingGT("neither a scene directory nor a ground-truth folder", {"path": str(source)})

    directory = SceneDirectory.load(source)
    manifest = directory.manifest
    if directory.analytic_gt_dir is not None:
        return read_ground_truth(directory.analytic_gt_dir, manifest.class_count)
    if not directory.has_clouds:
        raise MissingGT("scene directory has no analytic ground truth and no point clouds", {"path": str(source)})
    layout = build_layout(directory.pose_list(), resolution, expand, class_count=manifest.class_count)
    return build_gt(
        directory.cloud_frames(),
        directory.frames,
        directory.cameras,
        manifest.road_classes,
        manifest.class_count,
        grid=bev_grid_for(layout, resolution),
    )


def _row_name(path: Path) -> str:
    """Run folder name for out_dir/checkpoint.rsplat and out_dir/bev"""
    return path.parent.name if path.is_file() or path.name == BEV_DIR else path.name


def cmd_evaluate(
    checkpoints: Sequence[Union[str, Path]],
    gt_source: Union[str, Path],
    out_report: Optional[Union[str, Path]] = None,
    maps: Sequence[Union[str, Path]] = (),
    radius: float = ELEVATION_RADIUS,
) -> EvaluationReport:
    """Score every checkpoint (rendered on the GT grid) and every exported map
    folder; rows are sorted by name with a mean row"""
    if not checkpoints and not maps:
        raise MissingGT("nothing to evaluate: pass checkpoints or map folders")
    rows: List[EvaluationRow] = []
    gt = None
    for path in map(Path, checkpoints):
        restored = checkpoint_load(path)
        if gt is None:
            gt = load_ground_truth(gt_source, restored.scene.class_count, restored.scene.grid_resolution)
        rows.append(evaluate_scene(restored.scene, gt, _row_name(path), radius))
    for path in map(Path, maps):
        bev = read_bev_maps(path)
        if gt is None:
            gt = load_ground_truth(gt_source, resolution=bev.grid.resolution)
        rows.append(evaluate_maps(_row_name(path), bev, gt, radius=radius))

    report = make_report(rows)
    if out_report is not None:
        out_report = Path(out_report)
        out_report.parent.mkdir(parents=True, exist_ok=True)
        out_report.write_text(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("Evaluation finished", extra={"rows": len(rows), "mean": report.mean.model_dump()})
    return report


def format_report(report: EvaluationReport) -> str:
    lines = [f"{'scene':<24} {'PSNR':>8} {'mIoU':>8} {'Elev':>8} {'matched':>8} {'cover':>8}"]
    for row in report.rows + [report.mean]:
        elev = f"{row.elevation_rmse:8.4f}" if row.elevation_rmse is not None else f"{'-':>8}"
        lines.append(
            f"{row.scene:<24} {row.psnr:8.2f} {row.miou:8.4f} {elev} {row.matched_fraction:8.3f} {row.coverage:8.3f}"
        )
    return "\n".join(lines)


def add_parser(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("evaluate", help="Evaluate reconstructions against ground truth")
    parser.add_argument("checkpoints", type=Path, nargs="*")
    parser.add_argument("--gt", type=Path, required=True, help="Scene directory or analytic_gt folder")
    parser.add_argument("--maps", type=Path, nargs="*", default=[], help="Exported BEV map folders")
    parser.add_argument("--out", type=Path, help="Report JSON path")
    parser.add_argument("--radius", type=float, default=ELEVATION_RADIUS)
    parser.set_defaults(handler=run)
    return parser


def run(args: argparse.Namespace) -> int:
    report = cmd_evaluate(args.checkpoints, args.gt, args.out, args.maps, args.radius)
    print(format_report(report))
    return 0
