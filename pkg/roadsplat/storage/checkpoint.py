"""
Binary checkpoints of a scene and its training state.

Layout: 8-byte magic, uint32 version, uint64 header length, a UTF-8 JSON
header (sorted keys) describing metadata and arrays, then the raw
little-endian array bytes in header order. Saving a loaded checkpoint
reproduces the file byte for byte.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import numpy as np

from config.constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from roadsplat.core.exceptions import CorruptCheckpoint
from roadsplat.core.logging import get_logger
from roadsplat.engine.geometry import CameraModel
from roadsplat.engine.optimizer import AdamOptimizer
from roadsplat.engine.scene import SurfelScene
from roadsplat.engine.trainer import TrainState
from roadsplat.models import CameraRecord, EpochSnapshot, Layout, TrainConfig

logger = get_logger(__name__)

_PREAMBLE = struct.Struct("<8sIQ")

_SCENE_ARRAYS = (
    "xy",
    "z",
    "color",
    "log_scale",
    "logit_opacity",
    "quaternion",
    "semantics",
    "cells",
    "lattice",
    "road_mask",
    "grid_origin",
)


@dataclass
class Checkpoint:
    scene: SurfelScene
    state: Optional[TrainState] = None
    cameras: Dict[str, CameraModel] = field(default_factory=dict)
    config: Optional[TrainConfig] = None


def _little_endian(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    if array.dtype == np.bool_:
        return array.astype(np.uint8)
    return array.astype(array.dtype.newbyteorder("<"), copy=False)


def _collect_arrays(ckpt: Checkpoint) -> Dict[str, np.ndarray]:
    arrays = {f"scene.{name}": getattr(ckpt.scene, name) for name in _SCENE_ARRAYS}
    if ckpt.state is not None:
        arrays["state.exposure"] = ckpt.state.exposure
        arrays["state.z_initial"] = ckpt.state.z_initial
        arrays.update(ckpt.state.optimizer.state_arrays())
    return arrays


def _metadata(ckpt: Checkpoint) -> Dict[str, Any]:
    scene = ckpt.scene
    meta: Dict[str, Any] = {
        "scene": {
            "grid_resolution": scene.grid_resolution,
            "layout": scene.layout.value,
            "class_palette": [list(c) for c in scene.class_palette],
        },
        "cameras": [ckpt.cameras[c].to_record().model_dump(mode="json") for c in sorted(ckpt.cameras)],
        "config": ckpt.config.model_dump(mode="json") if ckpt.config is not None else None,
        "state": None,
    }
    if ckpt.state is not None:
        opt = ckpt.state.optimizer
        meta["state"] = {
            "step": ckpt.state.step,
            "camera_ids": list(ckpt.state.camera_ids),
            "z_range": ckpt.state.z_range,
            "epoch_log": [s.model_dump(mode="json") for s in ckpt.state.epoch_log],
            "epoch_totals": list(ckpt.state.epoch_totals),
            "epoch_skipped": ckpt.state.epoch_skipped,
            "adam": {"t": opt.t, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps},
        }
    return meta


def checkpoint_save(
    path: Union[str, Path],
    scene: SurfelScene,
    state: Optional[TrainState] = None,
    cameras: Optional[Mapping[str, CameraModel]] = None,
    config: Optional[TrainConfig] = None,
) -> Path:
    """Write a checkpoint; returns the path written"""
    ckpt = Checkpoint(scene, state, dict(cameras or {}), config)
    entries: List[Dict[str, Any]] = []
    blobs: List[bytes] = []
    offset = 0
    for name, array in _collect_arrays(ckpt).items():
        original = np.asarray(array)
        data = _little_endian(original)
        raw = data.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": "bool" if original.dtype == np.bool_ else data.dtype.str,
                "shape": list(original.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)

    header = json.dumps(
        {"meta": _metadata(ckpt), "arrays": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(_PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)))
        handle.write(header)
        for raw in blobs:
            handle.write(raw)
    logger.info("Checkpoint saved", extra={"path": str(path), "bytes": _PREAMBLE.size + len(header) + offset})
    return path


def _read_arrays(payload: bytes, entries: List[Dict[str, Any]]) -> Dict[str, np.ndarray]:
    arrays = {}
    for entry in entries:
        start, size = int(entry["offset"]), int(entry["nbytes"])
        if start < 0 or start + size > len(payload):
            raise CorruptCheckpoint("array extends past end of file", {"array": entry["name"]})
        is_bool = entry["dtype"] == "bool"
        dtype = np.dtype("u1") if is_bool else np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if expected != size:
            raise CorruptCheckpoint("array size does not match its shape", {"array": entry["name"]})
        array = np.frombuffer(payload, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=start)
        array = array.reshape(shape).astype(dtype.newbyteorder("="))
        arrays[entry["name"]] = array.astype(bool) if is_bool else array
    return arrays


def checkpoint_load(path: Union[str, Path]) -> Checkpoint:
    """Read a checkpoint; CorruptCheckpoint on any structural mismatch"""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CorruptCheckpoint(f"cannot read checkpoint: {e}", {"path": str(path)})
    if len(data) < _PREAMBLE.size:
        raise CorruptCheckpoint("file too short", {"path": str(path)})
    magic, version, header_len = _PREAMBLE.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint("bad magic", {"path": str(path)})
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpoint("unsupported version", {"path": str(path), "version": version})
    body = _PREAMBLE.size + header_len
    if body > len(data):
        raise CorruptCheckpoint("header extends past end of file", {"path": str(path)})
    try:
        header = json.loads(data[_PREAMBLE.size:body].decode("utf-8"))
        meta, entries = header["meta"], header["arrays"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as e:
        raise CorruptCheckpoint(f"unreadable header: {e}", {"path": str(path)})

    payload = data[body:]
    declared = sum(int(e["nbytes"]) for e in entries)
    if declared != len(payload):
        raise CorruptCheckpoint(
            "payload length mismatch", {"path": str(path), "declared": declared, "actual": len(payload)}
        )
    arrays = _read_arrays(payload, entries)

    try:
        scene_meta = meta["scene"]
        scene = SurfelScene(
            **{name: arrays[f"scene.{name}"] for name in _SCENE_ARRAYS},
            grid_resolution=float(scene_meta["grid_resolution"]),
            layout=Layout(scene_meta["layout"]),
            class_palette=[tuple(c) for c in scene_meta["class_palette"]],
        )
        cameras = {}
        for record in meta["cameras"]:
            cam = CameraModel.from_record(CameraRecord.model_validate(record))
            cameras[cam.camera_id] = cam
        config = TrainConfig.model_validate(meta["config"]) if meta["config"] is not None else None

        state = None
        if meta["state"] is not None:
            state_meta = meta["state"]
            adam_meta = state_meta["adam"]
            optimizer = AdamOptimizer(adam_meta["beta1"], adam_meta["beta2"], adam_meta["eps"])
            optimizer.load_state(
                adam_meta["t"], {k: v for k, v in arrays.items() if k.startswith("adam.")}
            )
            state = TrainState(
                step=int(state_meta["step"]),
                optimizer=optimizer,
                camera_ids=list(state_meta["camera_ids"]),
                exposure=arrays["state.exposure"],
                z_initial=arrays["state.z_initial"],
                z_range=float(state_meta["z_range"]),
                epoch_log=[EpochSnapshot.model_validate(s) for s in state_meta["epoch_log"]],
                epoch_totals=[float(t) for t in state_meta.get("epoch_totals", [])],
                epoch_skipped=int(state_meta.get("epoch_skipped", 0)),
            )
    except (KeyError, ValueError, TypeError) as e:
        raise CorruptCheckpoint(f"inconsistent checkpoint contents: {e}", {"path": str(path)})

    logger.info("Checkpoint loaded", extra={"path": str(path), "surfels": scene.surfel_count})
    return Checkpoint(scene=scene, state=state, cameras=cameras, config=config)
