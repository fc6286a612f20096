"""
Per-frame optimization of the surfel scene against labeled camera images.

Each step renders one (camera, pose) frame, evaluates the color, semantic,
smoothness and optional LiDAR elevation losses, backpropagates through the
rasterizer and takes one Adam step per parameter class. The frame order of
every epoch is a permutation seeded by (seed, epoch), so a run stopped at any
step and resumed from its checkpoint reproduces the uninterrupted run.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from tqdm import tqdm

from config.constants import DIVERGENCE_FACTOR, REFERENCE_SCENE_SIZE
from roadsplat.core.config import get_settings
from roadsplat.core.exceptions import DivergedScene, EmptyMask, EmptyScene, InputError
from roadsplat.core.logging import get_logger, step_var
from roadsplat.engine.evaluation import GroundTruthBev, evaluate_scene
from roadsplat.engine.geometry import CameraModel, Frame, PointCloud, camera_pose_world
from roadsplat.engine.losses import (
    ElevationMatch,
    LossParts,
    color_loss,
    elevation_loss_from_match,
    match_cloud,
    semantic_loss,
    smooth_loss,
    total_loss,
)
from roadsplat.engine.optimizer import AdamOptimizer
from roadsplat.engine.rasterizer import cull_frustum, render, render_backward
from roadsplat.engine.scene import SurfelScene, neighbor_table
from roadsplat.models import EpochSnapshot, StepRecord, TrainConfig
from roadsplat.utils.monitoring import MetricsCollector

logger = get_logger(__name__)
settings = get_settings()


@dataclass
class TrainState:
    """Everything beyond the scene arrays needed to resume a run"""

    step: int
    optimizer: AdamOptimizer
    camera_ids: List[str]
    exposure: np.ndarray  # (cameras, 2) rows of (a, b) in camera_ids order
    z_initial: np.ndarray
    z_range: float
    epoch_log: List[EpochSnapshot] = field(default_factory=list)
    # totals and skips of the epoch in progress; checkpointed so a resumed
    # run reports the same epoch means as an uninterrupted one
    epoch_totals: List[float] = field(default_factory=list)
    epoch_skipped: int = 0

    @classmethod
    def fresh(cls, scene: SurfelScene, cameras: Mapping[str, CameraModel], cfg: TrainConfig) -> "TrainState":
        camera_ids = sorted(cameras)
        exposure = np.array(
            [[cameras[c].exposure_a, cameras[c].exposure_b] for c in camera_ids], dtype=np.float64
        ).reshape(-1, 2)
        z_range = float(np.ptp(scene.z)) if scene.surfel_count else 0.0
        return cls(
            step=0,
            optimizer=AdamOptimizer(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
            camera_ids=camera_ids,
            exposure=exposure,
            z_initial=scene.z.copy(),
            z_range=z_range,
        )

    def camera_index(self, camera_id: str) -> int:
        return self.camera_ids.index(camera_id)

    @property
    def reference_camera(self) -> Optional[str]:
        """Camera whose exposure is held at its initial value (first sorted id)"""
        return self.camera_ids[0] if self.camera_ids else None


@dataclass
class TrainResult:
    scene: SurfelScene
    cameras: Dict[str, CameraModel]
    state: TrainState
    steps: List[StepRecord]
    epochs: List[EpochSnapshot]
    skipped_frames: int = 0
    total_steps: int = 0

    @property
    def finished(self) -> bool:
        return self.state.step >= self.total_steps


def scene_size_factor(scene: SurfelScene) -> float:
    """Scene extent over the reference size; scales the elevation learning rate"""
    xmin, ymin, xmax, ymax = scene.extent()
    return max(xmax - xmin, ymax - ymin) / REFERENCE_SCENE_SIZE


def lr_z_at(step: int, total_steps: int, cfg: TrainConfig, size_factor: float = 1.0) -> float:
    """Exponential decay from lr_z_start to lr_z_end over the run, times
    size_factor; the endpoints are returned exactly"""
    if step < 0 or step > max(total_steps, 0):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    start = cfg.lr_z_start * size_factor
    end = cfg.lr_z_end * size_factor
    if cfg.lr_z_start == 0.0:
        return 0.0
    if step == 0 or total_steps == 0:
        return start
    if step == total_steps:
        return end
    return start * (cfg.lr_z_end / cfg.lr_z_start) ** (step / total_steps)


def epoch_order(epoch: int, frame_count: int, cfg: TrainConfig) -> np.ndarray:
    """Frame visiting order of one epoch"""
    if not cfg.shuffle:
        return np.arange(frame_count)
    return np.random.default_rng([cfg.seed, epoch]).permutation(frame_count)


def _learning_rates(cfg: TrainConfig, lr_z: float) -> Dict[str, float]:
    return {
        "z": lr_z,
        "log_scale": cfg.lr_scale,
        "logit_opacity": cfg.lr_alpha,
        "quaternion": cfg.lr_rot,
        "color": cfg.lr_color,
        "semantics": cfg.lr_semantics,
        "exposure": cfg.lr_exposure,
    }


def _check_divergence(scene: SurfelScene, state: TrainState, step: int):
    drift = float(np.mean(np.abs(scene.z - state.z_initial))) if scene.surfel_count else 0.0
    limit = DIVERGENCE_FACTOR * max(state.z_range, 1.0)
    if not np.isfinite(drift) or drift > limit:
        raise DivergedScene(
            "mean elevation drifted beyond the initial range",
            {"step": step, "mean_drift": drift, "limit": limit},
        )


def train_step(
    scene: SurfelScene,
    frame: Frame,
    cam: CameraModel,
    neighbors: np.ndarray,
    match: Optional[ElevationMatch],
    cfg: TrainConfig,
    state: TrainState,
    lr_z: float,
    threads: int = 1,
) -> LossParts:
    """One render / loss / backward / update cycle on a single frame"""
    use_lidar = match is not None
    weights = cfg.weights
    culled = None
    if not cam.is_orthographic:
        culled = cull_frustum(scene, camera_pose_world(frame.pose, cam), cam)
    output = render(scene, frame.pose, cam, culled, threads=threads)

    parts = LossParts()
    parts.color, d_color = color_loss(output, frame.image)
    parts.semantic, d_sem = semantic_loss(output, frame.image)
    parts.smooth, d_smooth = smooth_loss(scene, neighbors)
    d_elev = None
    if use_lidar:
        parts.elevation, d_elev = elevation_loss_from_match(scene, match, cfg.elevation_reduction)
    total_loss(parts, weights, use_lidar, step=state.step)

    grad = render_backward(
        scene, frame.pose, cam, output, weights.lambda_c * d_color, weights.lambda_s * d_sem
    )
    grad.z += weights.smooth_weight(use_lidar) * d_smooth
    if d_elev is not None:
        grad.z += weights.lambda_z * d_elev

    grads = grad.as_dict()
    grads["exposure"] = np.zeros_like(state.exposure)
    pinned = cfg.fix_reference_exposure and cam.camera_id == state.reference_camera
    if cam.camera_id in grad.exposure and not pinned:
        grads["exposure"][state.camera_index(cam.camera_id)] = grad.exposure[cam.camera_id]

    params = scene.parameters()
    params["exposure"] = state.exposure
    state.optimizer.step(params, grads, _learning_rates(cfg, lr_z))

    if cfg.lr_rot > 0:
        norm = np.sqrt(np.sum(scene.quaternion * scene.quaternion, axis=1, keepdims=True))
        scene.quaternion /= norm
    np.clip(scene.color, 0.0, 1.0, out=scene.color)
    return parts


def train(
    scene: SurfelScene,
    cameras: Mapping[str, CameraModel],
    frames: Sequence[Frame],
    cfg: Optional[TrainConfig] = None,
    cloud: Optional[PointCloud] = None,
    *,
    gt: Optional[GroundTruthBev] = None,
    state: Optional[TrainState] = None,
    stop_at_step: Optional[int] = None,
    metrics: Optional[MetricsCollector] = None,
    threads: Optional[int] = None,
    progress: bool = False,
) -> TrainResult:
    """Optimize a copy of `scene` for cfg.epochs passes over `frames`.

    Pass `state` (from a checkpoint) to resume; `stop_at_step` ends the run
    early with the state positioned to continue.
    """
    cfg = cfg or TrainConfig()
    scene = scene.copy()
    if scene.surfel_count == 0:
        raise EmptyScene("scene has no surfels to train")
    if cfg.epochs > 0 and not frames:
        raise EmptyScene("no frames to train on")
    missing = sorted({f.image.camera_id for f in frames} - set(cameras))
    if missing:
        raise InputError("frames reference unknown cameras", {"camera_ids": missing})

    frame_count = len(frames)
    total_steps = cfg.epochs * frame_count
    end_step = total_steps if stop_at_step is None else min(stop_at_step, total_steps)
    state = state or TrainState.fresh(scene, cameras, cfg)
    size_factor = scene_size_factor(scene) if cfg.scale_lr_z_by_extent else 1.0
    neighbors = neighbor_table(scene)
    threads = threads or settings.THREADS

    match = None
    if cfg.use_lidar:
        if cloud is None or len(cloud) == 0:
            raise InputError("LiDAR supervision requested without a point cloud")
        match = match_cloud(scene.xy, cloud, cfg.lidar_radius)
        logger.info("LiDAR matches", extra={"matched": len(match), "surfels": scene.surfel_count})

    run_log = logger.with_fields(frames=frame_count, epochs=cfg.epochs, total_steps=total_steps)
    run_log.info("Training started", extra={"start_step": state.step, "end_step": end_step})

    steps: List[StepRecord] = []
    skipped_total = 0
    order_cache: Dict[int, np.ndarray] = {}
    bar = tqdm(
        total=end_step - state.step,
        desc="train",
        disable=not (progress and settings.PROGRESS_BARS),
    )
    try:
        while state.step < end_step:
            step = state.step
            epoch, position = divmod(step, frame_count)
            if epoch not in order_cache:
                order_cache.clear()
                order_cache[epoch] = epoch_order(epoch, frame_count, cfg)
            frame = frames[int(order_cache[epoch][position])]
            camera_id = frame.image.camera_id
            cam = cameras[camera_id].with_exposure(*state.exposure[state.camera_index(camera_id)])
            lr_z = lr_z_at(step, total_steps, cfg, size_factor)
            step_var.set(step)

            try:
                parts = train_step(scene, frame, cam, neighbors, match, cfg, state, lr_z, threads)
            except EmptyMask:
                run_log.warning(
                    "Frame has no road pixels; skipped",
                    extra={"camera_id": camera_id, "frame_id": frame.image.pose_id},
                )
                state.epoch_skipped += 1
                skipped_total += 1
                if metrics is not None:
                    metrics.increment_counter("skipped_frames_total")
            else:
                record = StepRecord(
                    step=step,
                    epoch=epoch,
                    camera_id=camera_id,
                    frame_id=frame.image.pose_id,
                    total=total_loss(parts, cfg.weights, cfg.use_lidar),
                    lr_z=lr_z,
                    **parts.as_dict(),
                )
                steps.append(record)
                state.epoch_totals.append(record.total)
                run_log.debug("Step", extra=record.model_dump())
                if metrics is not None:
                    metrics.record_step(record)
                _check_divergence(scene, state, step)

            state.step += 1
            bar.update(1)
            if position == frame_count - 1:
                snapshot = _epoch_snapshot(scene, epoch, state.epoch_totals, state.epoch_skipped, gt)
                state.epoch_log.append(snapshot)
                state.epoch_totals = []
                state.epoch_skipped = 0
                if metrics is not None:
                    metrics.record_epoch(snapshot)
    finally:
        bar.close()
        step_var.set(None)

    trained_cameras = {
        cid: cameras[cid].with_exposure(*state.exposure[i]) for i, cid in enumerate(state.camera_ids)
    }
    for cid, cam in cameras.items():
        trained_cameras.setdefault(cid, cam)
    run_log.info(
        "Training stopped",
        extra={"step": state.step, "skipped_frames": skipped_total, "finished": state.step >= total_steps},
    )
    return TrainResult(
        scene=scene,
        cameras=trained_cameras,
        state=state,
        steps=steps,
        epochs=list(state.epoch_log),
        skipped_frames=skipped_total,
        total_steps=total_steps,
    )


def _epoch_snapshot(
    scene: SurfelScene,
    epoch: int,
    totals: List[float],
    skipped: int,
    gt: Optional[GroundTruthBev],
) -> EpochSnapshot:
    snapshot = EpochSnapshot(
        epoch=epoch,
        steps=len(totals),
        mean_total=float(np.mean(totals)) if totals else 0.0,
        skipped_frames=skipped,
    )
    if gt is not None:
        try:
            row = evaluate_scene(scene, gt, name=f"epoch_{epoch}")
        except EmptyMask:
            logger.warning("Ground truth has no valid pixels", extra={"epoch": epoch})
        else:
            snapshot.psnr = row.psnr
            snapshot.miou = row.miou
            snapshot.elevation_rmse = row.elevation_rmse
    return snapshot
