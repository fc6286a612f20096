"""
Shared pieces of the command-line tools: reproducibility manifest, input
hashing, config file loading
"""

import hashlib
import json
import subprocess
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

from pydantic import ValidationError

from roadsplat import __version__
from roadsplat.core.exceptions import InputError
from roadsplat.core.logging import get_logger
from roadsplat.models import RunManifest, TrainConfig

logger = get_logger(__name__)

RUN_MANIFEST_FILE = "run_manifest.json"
METRICS_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "checkpoint.rsplat"
BEV_DIR = "bev"


def git_revision() -> Optional[str]:
    """HEAD of the repository this package lives in, if any"""
    try:
        result = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
            check=False,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    revision = result.stdout.strip()
    return revision if result.returncode == 0 and revision else None


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def hash_inputs(paths: Iterable[Union[str, Path]]) -> Dict[str, str]:
    """SHA-256 of every file under the given files or directories, keyed by
    path relative to its root"""
    hashes: Dict[str, str] = {}
    for root in paths:
        root = Path(root)
        if root.is_file():
            hashes[root.name] = sha256_file(root)
            continue
        for path in sorted(p for p in root.rglob("*") if p.is_file()):
            hashes[f"{root.name}/{path.relative_to(root).as_posix()}"] = sha256_file(path)
    return hashes


def load_train_config(path: Optional[Union[str, Path]], overrides: Dict[str, Any]) -> TrainConfig:
    """TrainConfig from a JSON file (or defaults) with CLI overrides applied"""
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as e:
            raise InputError(f"cannot read config: {e}", {"path": str(path)})
        except json.JSONDecodeError as e:
            raise InputError(f"config is not valid JSON: {e.msg}", {"path": str(path), "line": e.lineno})
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.model_validate(data)
    except ValidationError as e:
        fields = [".".join(str(p) for p in err["loc"]) for err in e.errors()]
        raise InputError("invalid training config", {"fields": fields})


def write_run_manifest(
    out_dir: Path,
    command: str,
    seed: int,
    config: Dict[str, Any],
    options: Dict[str, Any],
    inputs: Iterable[Union[str, Path]],
) -> Path:
    manifest = RunManifest(
        command=command,
        seed=seed,
        config=config,
        options=options,
        git_revision=git_revision(),
        input_hashes=hash_inputs(inputs),
        version=__version__,
    )
    path = out_dir / RUN_MANIFEST_FILE
    path.write_text(json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
