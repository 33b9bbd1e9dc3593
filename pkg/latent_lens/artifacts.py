"""
Artifact helpers - atomic file writes, canonical JSON and run metadata
"""
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

import numpy as np
import pandas as pd
import pydantic

from latent_lens import __version__
from latent_lens.exceptions import FormatError, MissingArtifactError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    """Write bytes to ``path`` via a temp file and rename, so readers never see a partial file"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    try:
        with open(tmp_path, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, path)
    except OSError as e:
        raise FormatError(f"Failed to write artifact: {e}", path=str(path)) from e
    return path


def canonical_json(data: Any) -> bytes:
    """Sorted-key JSON with a trailing newline; identical input gives identical bytes"""
    text = json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False)
    return (text + "\n").encode("utf-8")


def write_json(path: PathLike, data: Any) -> Path:
    if isinstance(data, pydantic.BaseModel):
        data = data.model_dump(mode="json")
    return atomic_write_bytes(path, canonical_json(data))


def read_json(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"Artifact not found: {path}", path=str(path))
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"Invalid JSON: {e}", path=str(path)) from e


def write_csv(path: PathLike, df: pd.DataFrame) -> Path:
    return atomic_write_bytes(path, df.to_csv(index=False, lineterminator="\n").encode("utf-8"))


def require(path: PathLike, what: str) -> Path:
    """Return ``path`` if it exists, else raise MissingArtifactError naming the expected location"""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"Missing {what}: expected {path}", path=str(path))
    return path


def config_hash(config: Any) -> str:
    if isinstance(config, pydantic.BaseModel):
        config = config.model_dump(mode="json")
    return hashlib.sha256(canonical_json(config)).hexdigest()


def write_run_meta(
    out_dir: PathLike,
    command: str,
    config: Any,
    seed: int,
    started_at: float,
    argv: Optional[Iterable[str]] = None,
) -> Path:
    """Record what is needed to re-execute a pipeline step identically.

    ``run_meta.json`` maps each command to its latest invocation, so steps
    run one after another in the same output directory all stay on record.
    """
    if isinstance(config, pydantic.BaseModel):
        config = config.model_dump(mode="json")
    path = Path(out_dir) / "run_meta.json"
    entries: Dict[str, Any] = {}
    if path.exists():
        try:
            entries = read_json(path)
        except FormatError as e:
            logger.warning("Replacing unreadable run_meta.json: %s", e)
    entries[command] = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "argv": list(argv) if argv is not None else sys.argv[1:],
        "versions": {
            "latent_lens": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "pandas": pd.__version__,
            "pydantic": pydantic.VERSION,
        },
        "wall_clock_seconds": round(time.time() - started_at, 3),
    }
    write_json(path, entries)
    logger.debug("run_meta written command=%s path=%s", command, path)
    return path
