#!/usr/bin/env python3
"""
End-to-end acceptance runs on the bundled synthetic scenes
Reconstruction quality, exposure recovery, LiDAR effect, initialization and
layout ablations, and run-to-run determinism
"""

import argparse
import json
import os
import sys
import tempfile
import time
from pathlib import Path
from typing import Callable, Dict, List, Tuple

import numpy as np
from tqdm import tqdm

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from roadsplat.cli.common import BEV_DIR, CHECKPOINT_FILE  # noqa: E402
from roadsplat.cli.evaluate import cmd_evaluate  # noqa: E402
from roadsplat.cli.reconstruct import ReconstructOutput, cmd_reconstruct  # noqa: E402
from roadsplat.cli.synth import cmd_synth  # noqa: E402
from roadsplat.core.logging import setup_logging  # noqa: E402
from roadsplat.models import EvaluationRow, InitMode, Layout, ReconstructOptions, TrainConfig  # noqa: E402
from roadsplat.storage.scene_directory import ANALYTIC_GT_DIR  # noqa: E402

SPECS_DIR = Path(__file__).resolve().parent.parent / "config" / "specs"

MIN_PSNR = 28.0
MIN_MIOU = 0.90
MAX_RMSE = 0.02
MAX_EXPOSURE_ERROR = 0.02
MIN_LIDAR_GAIN = 3.0
MAX_LAYOUT_PSNR_DROP = 0.5


def rmse(row: EvaluationRow) -> float:
    return row.elevation_rmse if row.elevation_rmse is not None else float("inf")


def print_header(title: str):
    """Print a formatted header"""
    print(f"\n{'='*60}")
    print(f"  {title}")
    print(f"{'='*60}")


class Acceptance:
    """Runs reconstructions under a work directory and keeps the verdicts"""

    def __init__(self, work_dir: Path, resolution: float, threads: int, epochs: int):
        self.work_dir = work_dir
        self.resolution = resolution
        self.threads = threads
        self.epochs = epochs
        self.scenes: Dict[str, Path] = {}
        self.results: List[Tuple[str, bool, str]] = []

    def scene(self, name: str) -> Path:
        if name not in self.scenes:
            self.scenes[name] = cmd_synth(SPECS_DIR / f"{name}.spec", self.work_dir / "scenes" / name, threads=self.threads)
        return self.scenes[name]

    def reconstruct(self, scene: str, run: str, **overrides) -> Tuple[ReconstructOutput, EvaluationRow]:
        cfg = TrainConfig(epochs=self.epochs, use_lidar=overrides.pop("use_lidar", False))
        options = ReconstructOptions(resolution=self.resolution, threads=self.threads, **overrides)
        scene_dir = self.scene(scene)
        output = cmd_reconstruct(scene_dir, self.work_dir / "runs" / run, cfg, options)
        row = cmd_evaluate([output.checkpoint], scene_dir).rows[0]
        return output, row

    def check(self, name: str, passed: bool, detail: str):
        self.results.append((name, passed, detail))
        print(f"{'✅' if passed else '❌'} {name}: {detail}")

    def end_to_end(self):
        print_header("1️⃣  Flat road reconstruction")
        output, row = self.reconstruct("flat", "flat")
        self.check("PSNR", row.psnr >= MIN_PSNR, f"{row.psnr:.2f} dB (>= {MIN_PSNR})")
        self.check("mIoU", row.miou >= MIN_MIOU, f"{row.miou:.4f} (>= {MIN_MIOU})")
        self.check("Elevation RMSE", rmse(row) <= MAX_RMSE, f"{rmse(row):.4f} m (<= {MAX_RMSE})")

        injected = json.loads((self.scene("flat") / ANALYTIC_GT_DIR / "exposure.json").read_text())
        state = output.result.state
        worst = max(
            float(np.max(np.abs(state.exposure[state.camera_index(cid)] - np.asarray(ab))))
            for cid, ab in injected.items()
        )
        self.check("Exposure recovery", worst <= MAX_EXPOSURE_ERROR, f"max error {worst:.4f} (<= {MAX_EXPOSURE_ERROR})")

    def lidar_effect(self):
        print_header("2️⃣  LiDAR supervision on bumps")
        _, plain = self.reconstruct("bumps", "bumps_camera")
        _, lidar = self.reconstruct("bumps", "bumps_lidar", use_lidar=True)
        gain = rmse(plain) / max(rmse(lidar), 1e-12)
        self.check("LiDAR gain", gain >= MIN_LIDAR_GAIN, f"RMSE {rmse(plain):.4f} -> {rmse(lidar):.4f} ({gain:.1f}x)")
        self.check("LiDAR RMSE", rmse(lidar) <= MAX_RMSE, f"{rmse(lidar):.4f} m (<= {MAX_RMSE})")

    def ablations(self):
        print_header("3️⃣  Initialization and layout ablations")
        _, with_init = self.reconstruct("inclined", "inclined_full")
        _, without_init = self.reconstruct("inclined", "inclined_none", init_mode=InitMode.NONE)
        self.check(
            "Pose initialization",
            rmse(without_init) > rmse(with_init),
            f"RMSE without {rmse(without_init):.4f} vs with {rmse(with_init):.4f}",
        )
        one, one_row = self.reconstruct("inclined", "inclined_layout1", layout=Layout.ONE)
        two, two_row = self.reconstruct("inclined", "inclined_layout2", layout=Layout.TWO)
        self.check(
            "Layout surfel count",
            one.result.scene.surfel_count < two.result.scene.surfel_count,
            f"{one.result.scene.surfel_count} vs {two.result.scene.surfel_count}",
        )
        self.check(
            "Layout PSNR",
            one_row.psnr >= two_row.psnr - MAX_LAYOUT_PSNR_DROP,
            f"{one_row.psnr:.2f} dB vs {two_row.psnr:.2f} dB",
        )

    def determinism(self):
        print_header("4️⃣  Determinism")
        first, _ = self.reconstruct("flat", "flat_repeat_a")
        second, _ = self.reconstruct("flat", "flat_repeat_b")
        files = [CHECKPOINT_FILE] + [f"{BEV_DIR}/{p.name}" for p in first.bev.values()]
        same = all((first.out_dir / f).read_bytes() == (second.out_dir / f).read_bytes() for f in files)
        self.check("Bit-identical outputs", same, f"{len(files)} files compared")


def main():
    parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    parser.add_argument("--work-dir", type=Path, help="Keep scenes and runs here instead of a temp folder")
    parser.add_argument("--resolution", type=float, default=0.05)
    parser.add_argument("--epochs", type=int, default=1)
    parser.add_argument("--threads", type=int, default=4)
    parser.add_argument("--log-level", default="WARNING")
    args = parser.parse_args()
    setup_logging(args.log_level)

    with tempfile.TemporaryDirectory() as tmp:
        work_dir = args.work_dir or Path(tmp)
        acceptance = Acceptance(work_dir, args.resolution, args.threads, args.epochs)
        print_header("🚀 roadsplat acceptance")
        print(f"📁 Work dir: {work_dir}")
        stages: List[Callable[[], None]] = [
            acceptance.end_to_end,
            acceptance.lidar_effect,
            acceptance.ablations,
            acceptance.determinism,
        ]
        start = time.time()
        for stage in tqdm(stages, desc="stages"):
            stage()
        total_time = time.time() - start

    print_header("📋 Summary")
    failed = [name for name, passed, _ in acceptance.results if not passed]
    print(f"Checks passed: {len(acceptance.results) - len(failed)}/{len(acceptance.results)}")
    print(f"Total time taken: {total_time:.1f} seconds")
    if failed:
        print(f"⚠️ Failed: {', '.join(failed)}")
        return 1
    print("✅ All acceptance checks passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
