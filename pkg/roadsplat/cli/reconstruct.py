"""
reconstruct: scene directory -> trained checkpoint, BEV maps and metrics log
"""

import argparse
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

from roadsplat.cli.common import (
    BEV_DIR,
    CHECKPOINT_FILE,
    METRICS_FILE,
    load_train_config,
    write_run_manifest,
)
from roadsplat.core.config import get_settings
from roadsplat.core.exceptions import SceneDirectoryError
from roadsplat.core.logging import get_logger, log_performance, scene_var
from roadsplat.engine.evaluation import GroundTruthBev
from roadsplat.engine.initializer import init_appearance, init_from_poses, seed_elevation_from_cloud
from roadsplat.engine.rasterizer import BevMaps, render_bev_chunked
from roadsplat.engine.scene import build_layout
from roadsplat.engine.trainer import TrainResult, train
from roadsplat.models import InitMode, Layout, ReconstructOptions, TrainConfig
from roadsplat.storage.bev_export import read_ground_truth, write_bev_maps
from roadsplat.storage.checkpoint import checkpoint_load, checkpoint_save
from roadsplat.storage.scene_directory import CLOUDS_DIR, SceneDirectory
from roadsplat.utils.monitoring import MetricsCollector, performance_tracker, system_snapshot

logger = get_logger(__name__)
settings = get_settings()


@dataclass
class ReconstructOutput:
    out_dir: Path
    checkpoint: Path
    bev: Dict[str, Path]
    metrics: Path
    result: TrainResult
    maps: Optional[BevMaps]


def _analytic_gt(directory: SceneDirectory) -> Optional[GroundTruthBev]:
    gt_dir = directory.analytic_gt_dir
    if gt_dir is None:
        return None
    return read_ground_truth(gt_dir, directory.manifest.class_count)


@log_performance(logger)
def cmd_reconstruct(
    scene_dir: Union[str, Path],
    out_dir: Union[str, Path],
    config: Optional[TrainConfig] = None,
    options: Optional[ReconstructOptions] = None,
    resume: Optional[Union[str, Path]] = None,
    config_path: Optional[Union[str, Path]] = None,
) -> ReconstructOutput:
    """build_layout -> init_from_poses (plus the optional LiDAR and appearance
    seeding) -> train -> render_bev_chunked, then write the checkpoint, BEV
    maps, metrics log and run manifest"""
    config = config or TrainConfig()
    options = options or ReconstructOptions(threads=settings.THREADS)
    out_dir = Path(out_dir)

    directory = SceneDirectory.load(scene_dir, load_clouds=config.use_lidar)
    scene_var.set(directory.name)
    if config.use_lidar and not directory.has_clouds:
        raise SceneDirectoryError(
            "LiDAR supervision needs point clouds",
            {"missing": str(Path(scene_dir) / CLOUDS_DIR)},
        )
    cloud = directory.merged_cloud() if config.use_lidar else None
    gt = _analytic_gt(directory)

    state = None
    if resume is not None:
        restored = checkpoint_load(resume)
        scene, state = restored.scene, restored.state
        cameras = {cid: restored.cameras.get(cid, cam) for cid, cam in directory.cameras.items()}
    else:
        with performance_tracker.measure("build_layout"):
            scene = build_layout(
                directory.pose_list(),
                options.resolution,
                options.expand,
                options.layout,
                directory.manifest.class_count,
                directory.manifest.palette,
            )
        scene = init_from_poses(scene, directory.pose_list(), options.init_mode)
        cameras = dict(directory.cameras)
        if cloud is not None and options.seed_from_lidar:
            scene = seed_elevation_from_cloud(scene, cloud)
        if options.init_appearance:
            with performance_tracker.measure("init_appearance"):
                scene, cameras = init_appearance(scene, cameras, directory.frames)

    metrics = MetricsCollector()
    with performance_tracker.measure("train"):
        result = train(
            scene,
            cameras,
            directory.frames,
            config,
            cloud,
            gt=gt,
            state=state,
            stop_at_step=options.stop_at_step,
            metrics=metrics,
            threads=options.threads,
            progress=True,
        )

    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint = checkpoint_save(out_dir / CHECKPOINT_FILE, result.scene, result.state, result.cameras, config)
    maps = None
    bev_paths: Dict[str, Path] = {}
    if result.finished:
        with performance_tracker.measure("render_bev"):
            grid = gt.grid if gt is not None and gt.grid.resolution == options.resolution else None
            maps = render_bev_chunked(
                result.scene, options.resolution, settings.BEV_CHUNK_PIXELS, grid=grid, threads=options.threads
            )
        bev_paths = write_bev_maps(out_dir / BEV_DIR, maps, result.scene.class_palette)
    metrics_path = metrics.write_jsonl(out_dir / METRICS_FILE)

    inputs = [scene_dir] + ([config_path] if config_path else []) + ([resume] if resume else [])
    write_run_manifest(
        out_dir,
        "reconstruct",
        config.seed,
        config.model_dump(mode="json"),
        options.model_dump(mode="json"),
        inputs,
    )
    logger.info(
        "Reconstruction finished",
        extra={
            "out_dir": str(out_dir),
            "steps": result.state.step,
            "skipped_frames": result.skipped_frames,
            "metrics": metrics.get_metrics_summary()["counters"],
            "performance": performance_tracker.get_performance_summary(),
            "system": system_snapshot(),
        },
    )
    return ReconstructOutput(out_dir, checkpoint, bev_paths, metrics_path, result, maps)


def add_parser(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("reconstruct", help="Reconstruct a road surface from a scene directory")
    parser.add_argument("scene_dir", type=Path)
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--config", type=Path, help="TrainConfig JSON file")
    parser.add_argument("--resolution", type=float, default=settings.DEFAULT_RESOLUTION)
    parser.add_argument("--layout", choices=[m.value for m in Layout], default=Layout.ONE.value)
    parser.add_argument("--init-mode", choices=[m.value for m in InitMode], default=InitMode.FULL.value)
    parser.add_argument("--use-lidar", action="store_true", default=None)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--expand", type=float, default=settings.DEFAULT_EXPAND)
    parser.add_argument("--threads", type=int, default=settings.THREADS)
    parser.add_argument("--no-shuffle", action="store_true")
    parser.add_argument("--no-appearance-init", action="store_true", help="Keep the default colors and semantics")
    parser.add_argument("--no-lidar-seed", action="store_true", help="Keep pose-plane elevations with --use-lidar")
    parser.add_argument("--resume", type=Path, help="Continue from a checkpoint")
    parser.add_argument("--stop-at-step", type=int, help="Stop after this many steps in total")
    parser.set_defaults(handler=run)
    return parser


def run(args: argparse.Namespace) -> int:
    overrides = {"epochs": args.epochs, "seed": args.seed, "use_lidar": args.use_lidar}
    if args.no_shuffle:
        overrides["shuffle"] = False
    config = load_train_config(args.config, overrides)
    options = ReconstructOptions(
        resolution=args.resolution,
        layout=Layout(args.layout),
        init_mode=InitMode(args.init_mode),
        expand=args.expand,
        threads=args.threads,
        stop_at_step=args.stop_at_step,
        init_appearance=not args.no_appearance_init,
        seed_from_lidar=not args.no_lidar_seed,
    )
    output = cmd_reconstruct(args.scene_dir, args.out_dir, config, options, args.resume, args.config)
    print(f"checkpoint: {output.checkpoint}")
    for layer, path in output.bev.items():
        print(f"{layer}: {path}")
    print(f"metrics: {output.metrics}")
    return 0
