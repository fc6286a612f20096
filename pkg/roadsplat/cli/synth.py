"""
synth: JSON spec -> synthetic scene directory with analytic ground truth
"""

import argparse
from pathlib import Path
from typing import Optional, Union

from roadsplat.core.logging import get_logger, scene_var
from roadsplat.engine.synth import generate, load_spec

logger = get_logger(__name__)


def cmd_synth(
    spec_file: Union[str, Path],
    out_dir: Union[str, Path],
    seed: Optional[int] = None,
    threads: Optional[int] = None,
) -> Path:
    """Generate the scene described by `spec_file` into `out_dir`"""
    spec = load_spec(spec_file)
    scene_var.set(spec.name)
    return generate(spec, seed=seed, threads=threads).write(out_dir)


def add_parser(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("synth", help="Generate a synthetic scene directory")
    parser.add_argument("spec_file", type=Path)
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--seed", type=int, help="Overrides the spec's seed")
    parser.add_argument("--threads", type=int)
    parser.set_defaults(handler=run)
    return parser


def run(args: argparse.Namespace) -> int:
    out_dir = cmd_synth(args.spec_file, args.out_dir, args.seed, args.threads)
    print(f"scene: {out_dir}")
    return 0
