"""
GridSearch - trains one SAE per (latent_dim, k) cell and keeps a resumable manifest.

Layout under the output directory:
    grid/<L>_<k>/model.saec
    grid/<L>_<k>/stats.json
    grid/manifest.json
    grid/summary.csv
"""
import hashlib
import logging
import struct
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from tqdm import tqdm

from latent_lens.artifacts import read_json, write_csv, write_json
from latent_lens.embedding_store import EmbeddingCorpus
from latent_lens.exceptions import FormatError, MissingArtifactError
from latent_lens.sae_core import SaeConfig, TopKActivation, TrainStats, load_model, save_model, train

logger = logging.getLogger(__name__)

DEFAULT_LATENT_DIMS = [100, 200, 300, 400, 600, 800, 1200]
DEFAULT_K_VALUES = [5, 10, 15, 20, 25, 30, 35]
SUMMARY_COLUMNS = ["latent_dim", "k", "status", "final_val_mse", "dead_latents", "runtime_seconds", "reason"]


class GridSpec(BaseModel):
    latent_dims: List[int] = Field(default_factory=lambda: list(DEFAULT_LATENT_DIMS))
    k_values: List[int] = Field(default_factory=lambda: list(DEFAULT_K_VALUES))
    base: SaeConfig = Field(..., description="Template; latent_dim, activation and seed are set per cell")
    output_dir: str = Field(..., description="Run root; cells live under <output_dir>/grid")
    parallel_workers: int = Field(default=1, gt=0)

    @property
    def grid_dir(self) -> Path:
        return Path(self.output_dir) / "grid"


class GridCell(BaseModel):
    latent_dim: int
    k: int
    status: Literal["completed", "skipped", "failed"]
    seed: Optional[int] = None
    checkpoint: Optional[str] = None
    stats_path: Optional[str] = None
    stats: Optional[TrainStats] = None
    seconds: Optional[float] = None
    resumed: bool = False
    reason: Optional[str] = None

    @property
    def key(self) -> str:
        return cell_key(self.latent_dim, self.k)


class GridResult(BaseModel):
    grid_dir: str
    cells: List[GridCell] = Field(default_factory=list)

    def completed(self) -> List[GridCell]:
        return [c for c in self.cells if c.status == "completed"]


def cell_key(latent_dim: int, k: int) -> str:
    return f"{latent_dim}_{k}"


def derive_seed(base_seed: int, latent_dim: int, k: int) -> int:
    """64-bit seed for one cell, stable across processes and platforms"""
    digest = hashlib.blake2b(struct.pack("<QQQ", base_seed, latent_dim, k), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def cell_config(base: SaeConfig, latent_dim: int, k: int) -> SaeConfig:
    return base.model_copy(update={
        "latent_dim": latent_dim,
        "activation": TopKActivation(k=k),
        "seed": derive_seed(base.seed, latent_dim, k),
    })


def _write_cell_stats(path: Path, stats: TrainStats, seconds: float) -> Path:
    return write_json(path, {**stats.model_dump(mode="json"), "runtime_seconds": seconds})


def _read_cell_stats(path: Path) -> Tuple[TrainStats, Optional[float]]:
    """TrainStats plus the wall-clock seconds saved beside them"""
    data = read_json(path)
    seconds = data.pop("runtime_seconds", None)
    return TrainStats(**data), seconds


def _existing_cell(cell_dir: Path, config: SaeConfig) -> Optional[Tuple[TrainStats, Optional[float]]]:
    """Stats and runtime of a finished cell whose checkpoint loads and matches ``config``"""
    model_path, stats_path = cell_dir / "model.saec", cell_dir / "stats.json"
    if not (model_path.exists() and stats_path.exists()):
        return None
    try:
        model = load_model(model_path)
        stats, seconds = _read_cell_stats(stats_path)
    except (FormatError, MissingArtifactError, ValueError) as e:
        logger.warning("Ignoring unreadable cell %s: %s", cell_dir.name, e)
        return None
    if model.config != config:
        logger.warning("Ignoring cell %s: checkpoint config differs", cell_dir.name)
        return None
    return stats, seconds


# Worker-process state: corpora are shipped once per worker rather than per cell.
_WORKER_CORPORA: Dict[str, EmbeddingCorpus] = {}


def _init_worker(train_corpus: EmbeddingCorpus, val_corpus: EmbeddingCorpus) -> None:
    _WORKER_CORPORA["train"] = train_corpus
    _WORKER_CORPORA["val"] = val_corpus


def _train_cell(config_json: dict, cell_dir: str) -> Tuple[dict, float]:
    config = SaeConfig(**config_json)
    started = time.perf_counter()
    model, stats = train(config, _WORKER_CORPORA["train"], _WORKER_CORPORA["val"])
    save_model(model, Path(cell_dir) / "model.saec")
    seconds = round(time.perf_counter() - started, 3)
    _write_cell_stats(Path(cell_dir) / "stats.json", stats, seconds)
    return stats.model_dump(mode="json"), seconds


def _write_manifest(result: GridResult) -> None:
    result.cells.sort(key=lambda c: (c.latent_dim, c.k))
    write_json(Path(result.grid_dir) / "manifest.json", result)


def run_grid(
    spec: GridSpec,
    train_corpus: EmbeddingCorpus,
    val_corpus: EmbeddingCorpus,
    progress: bool = False,
) -> GridResult:
    """Train every valid cell; finished cells on disk are reused, failures are recorded"""
    grid_dir = spec.grid_dir
    grid_dir.mkdir(parents=True, exist_ok=True)
    result = GridResult(grid_dir=str(grid_dir))

    pending: Dict[str, Tuple[SaeConfig, Path]] = {}
    seen = set()
    for latent_dim in spec.latent_dims:
        for k in spec.k_values:
            if (latent_dim, k) in seen:
                continue
            seen.add((latent_dim, k))
            if k > latent_dim:
                logger.info("Skipping cell %s: k=%d exceeds latent_dim=%d", cell_key(latent_dim, k), k, latent_dim)
                result.cells.append(GridCell(
                    latent_dim=latent_dim, k=k, status="skipped", reason=f"k={k} > latent_dim={latent_dim}",
                ))
                continue
            config = cell_config(spec.base, latent_dim, k)
            cell_dir = grid_dir / cell_key(latent_dim, k)
            existing = _existing_cell(cell_dir, config)
            if existing is not None:
                stats, seconds = existing
                logger.info("✓ Reusing finished cell %s", cell_key(latent_dim, k))
                result.cells.append(GridCell(
                    latent_dim=latent_dim, k=k, status="completed", seed=config.seed,
                    checkpoint=str(cell_dir / "model.saec"), stats_path=str(cell_dir / "stats.json"),
                    stats=stats, seconds=seconds, resumed=True,
                ))
                continue
            cell_dir.mkdir(parents=True, exist_ok=True)
            pending[cell_key(latent_dim, k)] = (config, cell_dir)

    _write_manifest(result)
    logger.info(
        "Grid: %d cells to train, %d reused, %d skipped, workers=%d",
        len(pending), len(result.completed()), len(result.cells) - len(result.completed()),
        spec.parallel_workers,
    )

    def record(key: str, config: SaeConfig, cell_dir: Path, outcome) -> None:
        if isinstance(outcome, BaseException):
            logger.error("❌ Cell %s failed: %s", key, outcome)
            cell = GridCell(
                latent_dim=config.latent_dim, k=config.activation.k, status="failed",
                seed=config.seed, reason=f"{type(outcome).__name__}: {outcome}",
            )
        else:
            stats_json, seconds = outcome
            cell = GridCell(
                latent_dim=config.latent_dim, k=config.activation.k, status="completed",
                seed=config.seed, checkpoint=str(cell_dir / "model.saec"),
                stats_path=str(cell_dir / "stats.json"), stats=TrainStats(**stats_json),
                seconds=seconds,
            )
            logger.info("✓ Cell %s done val_mse=%.6f", key, cell.stats.final_val_mse)
        result.cells.append(cell)
        _write_manifest(result)

    bar = tqdm(total=len(pending), desc="grid", disable=not progress)
    if spec.parallel_workers == 1:
        _init_worker(train_corpus, val_corpus)
        for key, (config, cell_dir) in pending.items():
            try:
                outcome = _train_cell(config.model_dump(mode="json"), str(cell_dir))
            except Exception as e:  # a crashed cell must not abort the sweep
                outcome = e
            record(key, config, cell_dir, outcome)
            bar.update(1)
    elif pending:
        with ProcessPoolExecutor(
            max_workers=spec.parallel_workers,
            initializer=_init_worker,
            initargs=(train_corpus, val_corpus),
        ) as pool:
            futures = {
                pool.submit(_train_cell, config.model_dump(mode="json"), str(cell_dir)): key
                for key, (config, cell_dir) in pending.items()
            }
            for future in as_completed(futures):
                key = futures[future]
                config, cell_dir = pending[key]
                try:
                    outcome = future.result()
                except Exception as e:  # a crashed cell must not abort the sweep
                    outcome = e
                record(key, config, cell_dir, outcome)
                bar.update(1)
    bar.close()

    _write_manifest(result)
    return result


def load_grid_result(output_dir: str) -> GridResult:
    return GridResult(**read_json(Path(output_dir) / "grid" / "manifest.json"))


def summarize(result: GridResult) -> pd.DataFrame:
    """One row per cell; completed cells are read back from their stats.json"""
    rows = []
    for cell in sorted(result.cells, key=lambda c: (c.latent_dim, c.k)):
        row = {
            "latent_dim": cell.latent_dim,
            "k": cell.k,
            "status": cell.status,
            "final_val_mse": np.nan,
            "dead_latents": np.nan,
            "runtime_seconds": cell.seconds if cell.seconds is not None else np.nan,
            "reason": cell.reason or "",
        }
        if cell.status == "completed":
            stats_path = Path(cell.stats_path) if cell.stats_path else None
            checkpoint = Path(cell.checkpoint) if cell.checkpoint else None
            if stats_path and checkpoint and stats_path.exists() and checkpoint.exists():
                stats, seconds = _read_cell_stats(stats_path)
                row.update(final_val_mse=stats.final_val_mse, dead_latents=stats.final_dead_latents)
                if seconds is not None:
                    row["runtime_seconds"] = seconds
            else:
                logger.warning("Cell %s has no checkpoint on disk; recorded as absent", cell.key)
                row.update(status="absent", reason="checkpoint or stats missing")
        rows.append(row)
    df = pd.DataFrame(rows, columns=SUMMARY_COLUMNS)
    write_csv(Path(result.grid_dir) / "summary.csv", df)
    return df
