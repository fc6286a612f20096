#!/usr/bin/env python3
"""
Neighbor lookup benchmark
Lattice-index neighbors versus a brute-force directional search on random
road masks, checking equality and the speedup
"""

import argparse
import os
import sys
import time

import numpy as np
from tqdm import tqdm

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from roadsplat.engine.geometry import Pose  # noqa: E402
from roadsplat.engine.scene import build_layout, direction_offset, neighbor_table  # noqa: E402
from roadsplat.models import Direction, Layout  # noqa: E402

MIN_SPEEDUP = 10.0
CHUNK = 64


def print_header(title: str):
    """Print a formatted header"""
    print(f"\n{'='*60}")
    print(f"  {title}")
    print(f"{'='*60}")


def random_walk(rng: np.random.Generator, size: float, count: int):
    """Poses wandering inside a size x size square"""
    heading = rng.uniform(0, 2 * np.pi)
    xy = np.full(2, size / 2.0)
    poses = []
    for _ in range(count):
        heading += rng.normal(0.0, 0.4)
        xy = np.clip(xy + 2.0 * np.array([np.cos(heading), np.sin(heading)]), 0.0, size)
        poses.append(Pose(np.eye(3), np.array([xy[0], xy[1], 0.0])))
    return poses


def brute_force_table(scene) -> np.ndarray:
    """Scan every surfel for the one sitting at the expected lattice offset"""
    step = scene.lattice_step
    table = np.empty((4, scene.surfel_count), dtype=np.int64)
    own = np.arange(scene.surfel_count)
    for k, direction in enumerate(Direction):
        dr, dc = direction_offset(scene.layout, direction)
        target = scene.xy + step * np.array([dc, dr], dtype=np.float64)
        for start in range(0, scene.surfel_count, CHUNK):
            block = target[start:start + CHUNK]
            dist = np.abs(block[:, None, :] - scene.xy[None, :, :]).sum(axis=2)
            nearest = dist.argmin(axis=1)
            hit = dist[np.arange(len(block)), nearest] < 1e-6 * step
            table[k, start:start + CHUNK] = np.where(hit, nearest, own[start:start + CHUNK])
    return table


def main():
    parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    parser.add_argument("--masks", type=int, default=100)
    parser.add_argument("--size", type=float, default=200.0, help="Largest mask side in lattice cells")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    print_header("Neighbor lookup: lattice index vs brute force")
    mismatches = 0
    largest = None
    for k in tqdm(range(args.masks), desc="masks"):
        size = rng.uniform(10.0, args.size - 20.0)
        layout = Layout.TWO if k % 2 else Layout.ONE
        scene = build_layout(random_walk(rng, size, int(size)), 1.0, float(rng.uniform(2.0, 8.0)), layout)

        start = time.perf_counter()
        fast = neighbor_table(scene)
        fast_time = time.perf_counter() - start
        start = time.perf_counter()
        slow = brute_force_table(scene)
        slow_time = time.perf_counter() - start

        if not np.array_equal(fast, slow):
            mismatches += 1
            print(f"❌ mask {k}: lattice and brute-force neighbors differ")
        if largest is None or scene.lattice.size > largest[0]:
            largest = (scene.lattice.size, scene.lattice.shape, scene.surfel_count, fast_time, slow_time)

    print_header("Summary")
    _, shape, count, fast_time, slow_time = largest
    speedup = slow_time / max(fast_time, 1e-9)
    print(f"Masks checked:      {args.masks}")
    print(f"Mismatches:         {mismatches}")
    print(f"Largest lattice:    {shape[0]} x {shape[1]} ({count} surfels)")
    print(f"Lattice lookup:     {fast_time * 1000:.2f} ms")
    print(f"Brute force:        {slow_time * 1000:.2f} ms")
    print(f"Speedup:            {speedup:.1f}x")
    ok = mismatches == 0 and speedup >= MIN_SPEEDUP
    print("✅ Neighbor lookup passes" if ok else "⚠️ Neighbor lookup failed a check")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
