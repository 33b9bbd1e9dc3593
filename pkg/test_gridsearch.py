"""
Tests for grid sweeps: cell layout, skipping, resume, seeds and summaries
"""
import json

import pandas as pd
import pytest

from latent_lens import gridsearch
from latent_lens.embedding_store import subset
from latent_lens.gridsearch import (
    DEFAULT_K_VALUES,
    DEFAULT_LATENT_DIMS,
    GridResult,
    GridSpec,
    cell_config,
    derive_seed,
    load_grid_result,
    run_grid,
    summarize,
)
from latent_lens.sae_core import ReluActivation, TrainStats, load_model


@pytest.fixture
def corpora(small_synth, small_split):
    return (
        subset(small_synth.corpus, small_split.train_indices),
        subset(small_synth.corpus, small_split.test_indices),
    )


def _spec(tmp_path, quick_config, dims=(8, 12), ks=(2,), workers=1, name="run"):
    return GridSpec(
        latent_dims=list(dims),
        k_values=list(ks),
        base=quick_config.model_copy(update={"epochs": 1}),
        output_dir=str(tmp_path / name),
        parallel_workers=workers,
    )


def test_two_cells_two_checkpoints(tmp_path, quick_config, corpora):
    spec = _spec(tmp_path, quick_config)
    result = run_grid(spec, *corpora)
    assert [(c.latent_dim, c.k, c.status) for c in result.cells] == [(8, 2, "completed"), (12, 2, "completed")]
    for cell in result.cells:
        assert (spec.grid_dir / cell.key / "model.saec").exists()
        assert (spec.grid_dir / cell.key / "stats.json").exists()
        assert load_model(cell.checkpoint).config.latent_dim == cell.latent_dim
    manifest = json.loads((spec.grid_dir / "manifest.json").read_text())
    assert len(manifest["cells"]) == 2


def test_k_above_latent_dim_is_skipped(tmp_path, quick_config, corpora):
    spec = _spec(tmp_path, quick_config, dims=(3, 8), ks=(4,))
    result = run_grid(spec, *corpora)
    by_key = {c.key: c for c in result.cells}
    assert by_key["3_4"].status == "skipped"
    assert "k=4" in by_key["3_4"].reason
    assert not (spec.grid_dir / "3_4").exists()
    assert by_key["8_4"].status == "completed"

    df = summarize(result).set_index(["latent_dim", "k"])
    assert df.loc[(3, 4), "status"] == "skipped"
    assert "k=4" in df.loc[(3, 4), "reason"]
    assert df.loc[(8, 4), "status"] == "completed"


def test_every_valid_cell_listed_once(tmp_path, quick_config, corpora):
    spec = _spec(tmp_path, quick_config, dims=(12, 8, 8), ks=(3, 2))
    run_grid(spec, *corpora)
    result = load_grid_result(spec.output_dir)
    keys = [(c.latent_dim, c.k) for c in result.cells]
    assert keys == [(8, 2), (8, 3), (12, 2), (12, 3)]


def test_cells_are_always_topk(tmp_path, quick_config):
    base = quick_config.model_copy(update={"activation": ReluActivation(l1_lambda=0.01)})
    config = cell_config(base, 16, 3)
    assert config.activation.kind == "topk" and config.activation.k == 3
    assert config.latent_dim == 16
    assert config.seed == derive_seed(base.seed, 16, 3)


def test_derived_seeds_are_stable_and_distinct():
    seeds = {derive_seed(42, l, k) for l in DEFAULT_LATENT_DIMS for k in DEFAULT_K_VALUES}
    assert len(seeds) == len(DEFAULT_LATENT_DIMS) * len(DEFAULT_K_VALUES)
    assert derive_seed(42, 200, 20) == derive_seed(42, 200, 20)
    assert derive_seed(42, 200, 20) != derive_seed(43, 200, 20)
    assert all(0 <= s < 2**64 for s in seeds)


def test_rerun_reuses_finished_cells(tmp_path, quick_config, corpora):
    spec = _spec(tmp_path, quick_config)
    run_grid(spec, *corpora)
    before = {p.name: p.read_bytes() for p in spec.grid_dir.glob("*/model.saec")}

    again = run_grid(spec, *corpora)
    assert all(c.resumed for c in again.cells)
    assert {p.name: p.read_bytes() for p in spec.grid_dir.glob("*/model.saec")} == before



def test_rerun_keeps_cell_runtime(tmp_path, quick_config, corpora):
    spec = _spec(tmp_path, quick_config)
    first = {c.key: c.seconds for c in run_grid(spec, *corpora).cells}
    assert all(s is not None for s in first.values())

    again = run_grid(spec, *corpora)
    assert {c.key: c.seconds for c in again.cells} == first
    df = summarize(again)
    assert not df["runtime_seconds"].isna().any()
    for row in df.itertuples(index=False):
        assert row.runtime_seconds == pytest.approx(first[f"{row.latent_dim}_{row.k}"])


def test_interrupted_grid_trains_only_missing_cells(tmp_path, quick_config, corpora):
    spec = _spec(tmp_path, quick_config)
    first = run_grid(spec, *corpora)
    reference = (spec.grid_dir / "12_2" / "model.saec").read_bytes()
    (spec.grid_dir / "12_2" / "model.saec").unlink()

    resumed = {c.key: c for c in run_grid(spec, *corpora).cells}
    assert resumed["8_2"].resumed
    assert not resumed["12_2"].resumed and resumed["12_2"].status == "completed"
    assert (spec.grid_dir / "12_2" / "model.saec").read_bytes() == reference
    assert len(first.cells) == len(resumed)


def test_changed_config_is_retrained(tmp_path, quick_config, corpora):
    spec = _spec(tmp_path, quick_config, dims=(8,))
    run_grid(spec, *corpora)
    changed = spec.model_copy(update={"base": spec.base.model_copy(update={"epochs": 2})})
    cell = run_grid(changed, *corpora).cells[0]
    assert not cell.resumed
    assert cell.stats.epochs_completed == 2


def test_worker_count_does_not_change_checkpoints(tmp_path, quick_config, corpora):
    serial = run_grid(_spec(tmp_path, quick_config, name="serial"), *corpora)
    parallel = run_grid(_spec(tmp_path, quick_config, workers=2, name="parallel"), *corpora)
    assert [c.key for c in serial.cells] == [c.key for c in parallel.cells]
    for a, b in zip(serial.cells, parallel.cells):
        assert open(a.checkpoint, "rb").read() == open(b.checkpoint, "rb").read()
        assert a.stats == b.stats


def test_failed_cell_does_not_abort(tmp_path, quick_config, corpora, monkeypatch):
    real_train = gridsearch.train

    def flaky_train(config, *args, **kwargs):
        if config.latent_dim == 8:
            raise RuntimeError("boom")
        return real_train(config, *args, **kwargs)

    monkeypatch.setattr(gridsearch, "train", flaky_train)
    result = run_grid(_spec(tmp_path, quick_config), *corpora)
    by_key = {c.key: c for c in result.cells}
    assert by_key["8_2"].status == "failed"
    assert "boom" in by_key["8_2"].reason
    assert by_key["12_2"].status == "completed"

    df = summarize(result).set_index(["latent_dim", "k"])
    assert df.loc[(8, 2), "status"] == "failed"
    assert "boom" in df.loc[(8, 2), "reason"]
    assert df.loc[(12, 2), "status"] == "completed"
    assert df.loc[(12, 2), "reason"] == ""


def test_summary_rows_match_stats(tmp_path, quick_config, corpora):
    spec = _spec(tmp_path, quick_config)
    df = summarize(run_grid(spec, *corpora))
    assert list(df.columns) == gridsearch.SUMMARY_COLUMNS
    assert len(df) == 2
    on_disk = pd.read_csv(spec.grid_dir / "summary.csv")
    assert len(on_disk) == 2
    for row in on_disk.itertuples(index=False):
        saved = json.loads((spec.grid_dir / f"{row.latent_dim}_{row.k}" / "stats.json").read_text())
        stats = TrainStats(**saved)
        assert row.runtime_seconds == pytest.approx(saved["runtime_seconds"])
        assert row.final_val_mse == pytest.approx(stats.final_val_mse, rel=1e-12)
        assert row.dead_latents == stats.final_dead_latents
        assert row.status == "completed"


def test_empty_grid_summary_is_header_only(tmp_path):
    result = GridResult(grid_dir=str(tmp_path / "grid"))
    df = summarize(result)
    assert df.empty
    assert (tmp_path / "grid" / "summary.csv").read_text() == ",".join(gridsearch.SUMMARY_COLUMNS) + "\n"


def test_missing_checkpoint_is_absent(tmp_path, quick_config, corpora):
    spec = _spec(tmp_path, quick_config)
    result = run_grid(spec, *corpora)
    (spec.grid_dir / "8_2" / "model.saec").unlink()
    df = summarize(result).set_index(["latent_dim", "k"])
    assert df.loc[(8, 2), "status"] == "absent"
    assert df.loc[(8, 2), "reason"] == "checkpoint or stats missing"
    assert df.loc[(12, 2), "status"] == "completed"
