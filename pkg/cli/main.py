"""
latent-lens command line - one subcommand per pipeline stage.

    synth -> train -> grid -> probe -> steer -> split -> export

Every stage reads its inputs from and writes its artifacts to one output
directory, so stages can be re-run independently. Exit codes: 0 success,
1 module/internal error, 2 config error, 3 missing upstream artifact.
"""
import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional

# Add parent directory to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import pandas as pd
from dotenv import load_dotenv

from latent_lens import __version__
from latent_lens.artifacts import read_json, require, write_csv, write_json, write_run_meta
from latent_lens.config import RunConfig, load_run_config, parse_model, read_config_file
from latent_lens.embedding_store import (
    CorpusSplit,
    EmbeddingCorpus,
    LabelSet,
    load_corpus,
    load_labels,
    load_split,
    make_split,
    save_split,
    subset,
)
from latent_lens.exceptions import (
    ConfigError,
    LatentLensError,
    MissingArtifactError,
    SpecError,
    UsageError,
)
from latent_lens.gridsearch import load_grid_result, run_grid, summarize
from latent_lens.probe import ProbeResult, fit_probe, misclassified_table, probe_grid
from latent_lens.sae_core import load_model, save_model, train
from latent_lens.splitting import build_flows, detect_splits, split_plateau, to_sankey
from latent_lens.steering import SteerConfig, SteeringReport, build_context, run_steering
from latent_lens.synth import SynthSpec, generate, standard_spec

# Fix Windows console encoding
if sys.platform == 'win32':
    sys.stdout.reconfigure(encoding='utf-8')

logger = logging.getLogger("latent_lens.cli")

EXIT_OK = 0
EXIT_MODULE_ERROR = 1
EXIT_CONFIG_ERROR = 2
EXIT_MISSING_ARTIFACT = 3

REPORT_SECTIONS = ["grid_heatmap", "probe", "steering_means", "histograms", "flows"]


# ---------------------------------------------------------------------------
# Shared loading
# ---------------------------------------------------------------------------

def _corpus(config: RunConfig, out: Path) -> EmbeddingCorpus:
    return load_corpus(require(config.paths.corpus or out / "corpus.embc", "corpus"))


def _labels(config: RunConfig, out: Path, corpus: EmbeddingCorpus, attribute: str) -> LabelSet:
    path = require(config.paths.labels.get(attribute) or out / f"labels_{attribute}.csv", f"labels for '{attribute}'")
    return load_labels(path, corpus, positive_label=attribute)


def _split(config: RunConfig, out: Path, corpus: EmbeddingCorpus) -> CorpusSplit:
    """The output directory's one train/test split, created on first use"""
    path = out / "split.json"
    if path.exists():
        split = load_split(path)
        split.check_bounds(corpus.count)
        return split

    label_vector = None
    if config.attributes:
        try:
            label_vector = _labels(config, out, corpus, config.attributes[0]).label_vector(corpus)
        except MissingArtifactError:
            logger.info("No labels for '%s'; split is not stratified", config.attributes[0])
    split = make_split(corpus.count, config.test_fraction, config.seed, label_vector)
    save_split(split, path)
    logger.info("✓ Created split train=%d test=%d path=%s", len(split.train_indices), len(split.test_indices), path)
    return split


def _attributes(config: RunConfig) -> List[str]:
    if not config.attributes:
        raise ConfigError("No attributes configured; set 'attributes' or a 'synth' section")
    return config.attributes


def _records(df: pd.DataFrame) -> List[dict]:
    """DataFrame rows as JSON-safe dicts (NaN -> null)"""
    return df.astype(object).where(df.notna(), None).to_dict(orient="records")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(config: RunConfig, out: Path, args: argparse.Namespace) -> Dict[str, Path]:
    if args.spec:
        data = read_config_file(args.spec)
        if args.seed is not None:
            data["seed"] = args.seed
        spec = parse_model(SynthSpec, data, args.spec)
    elif config.synth is not None:
        spec = config.synth
    else:
        spec = standard_spec(seed=config.seed)
    return generate(spec).save(out)


def cmd_train(config: RunConfig, out: Path, args: argparse.Namespace) -> Dict[str, Path]:
    corpus = _corpus(config, out)
    split = _split(config, out, corpus)
    model, stats = train(
        config.sae_config(corpus.dim),
        subset(corpus, split.train_indices),
        subset(corpus, split.test_indices),
        progress=config.verbose,
    )
    return {
        "model": save_model(model, out / "model.saec"),
        "train_stats": write_json(out / "train_stats.json", stats),
    }


def cmd_grid(config: RunConfig, out: Path, args: argparse.Namespace) -> Dict[str, Path]:
    corpus = _corpus(config, out)
    split = _split(config, out, corpus)
    result = run_grid(
        config.grid_spec(corpus.dim, out),
        subset(corpus, split.train_indices),
        subset(corpus, split.test_indices),
        progress=config.verbose,
    )
    summary = summarize(result)
    failed = [c.key for c in result.cells if c.status == "failed"]
    if failed:
        logger.warning("Grid finished with %d failed cells: %s", len(failed), failed)
    logger.info("✓ Grid summary rows=%d", len(summary))
    return {"manifest": Path(result.grid_dir) / "manifest.json", "summary": Path(result.grid_dir) / "summary.csv"}


def _merge_grid_probe(summary_path: Path, attribute: str, table: pd.DataFrame) -> None:
    summary = pd.read_csv(require(summary_path, "grid summary"))
    columns = {c: f"{attribute}_{c}" for c in ("phi", "precision", "recall")}
    summary = summary.drop(columns=[c for c in columns.values() if c in summary.columns])
    merged = summary.merge(
        table[["latent_dim", "k", *columns]].rename(columns=columns), on=["latent_dim", "k"], how="left",
    )
    write_csv(summary_path, merged)


def cmd_probe(config: RunConfig, out: Path, args: argparse.Namespace) -> Dict[str, Path]:
    model_path = out / "model.saec"
    manifest_path = out / "grid" / "manifest.json"
    if not model_path.exists() and not manifest_path.exists():
        raise MissingArtifactError(
            f"Missing checkpoint: expected {model_path} or {manifest_path}", path=str(model_path),
        )
    attributes = _attributes(config)
    corpus = _corpus(config, out)
    split = _split(config, out, corpus)
    model = load_model(model_path) if model_path.exists() else None
    grid = load_grid_result(str(out)) if manifest_path.exists() else None

    written: Dict[str, Path] = {}
    for attribute in attributes:
        labels = _labels(config, out, corpus, attribute)
        if model is not None:
            result = fit_probe(model, corpus, labels, split, config.probe)
            written[f"probe_{attribute}"] = write_json(out / f"probe_{attribute}.json", result)
            written[f"probe_{attribute}_misclassified"] = write_csv(
                out / f"probe_{attribute}_misclassified.csv", misclassified_table(result),
            )
        if grid is not None:
            table = probe_grid(grid, corpus, labels, split, config.probe)
            written[f"grid_probe_{attribute}"] = write_csv(out / "grid" / f"probe_{attribute}.csv", table)
            _merge_grid_probe(out / "grid" / "summary.csv", attribute, table)
    return written


def cmd_steer(config: RunConfig, out: Path, args: argparse.Namespace) -> Dict[str, Path]:
    attribute = config.steer_attribute()
    model_path = require(out / "model.saec", "checkpoint")
    probe_path = require(out / f"probe_{attribute}.json", f"probe result for '{attribute}'")
    probe = ProbeResult(**read_json(probe_path))
    model = load_model(model_path)
    corpus = _corpus(config, out)
    labels = _labels(config, out, corpus, attribute)
    split = _split(config, out, corpus)

    steer = SteerConfig(
        phi=probe.phi,
        a_phi=config.steer.a_phi,
        positive_class=attribute,
        negative_class=config.steer.negative_class or f"non_{attribute}",
    )
    ctx = build_context(model, corpus, labels, split.train_indices)
    report = run_steering(model, ctx, corpus, labels, split.test_indices, steer)
    return {
        "report": write_json(out / f"steering_{attribute}.json", report),
        "histograms": write_csv(out / f"steering_{attribute}_hist.csv", report.histogram_table()),
        "means": write_csv(out / f"steering_{attribute}_means.csv", report.means_table()),
    }


def cmd_split(config: RunConfig, out: Path, args: argparse.Namespace) -> Dict[str, Path]:
    attribute = config.split_attribute()
    grid = load_grid_result(str(out))
    corpus = _corpus(config, out)
    labels = _labels(config, out, corpus, attribute)
    split = _split(config, out, corpus)

    by_k: Dict[int, list] = {}
    for cell in grid.completed():
        by_k.setdefault(cell.k, []).append(cell)
    ks = [config.split.k] if config.split.k is not None else sorted(by_k)

    reports, flow_tables = [], []
    for k in ks:
        cells = sorted(by_k.get(k, []), key=lambda c: c.latent_dim)
        if len(cells) < 2:
            if config.split.k is not None:
                raise UsageError(f"Split analysis needs at least two completed grid cells with k={k}")
            logger.info("Skipping k=%d: %d completed cell(s)", k, len(cells))
            continue
        models = [load_model(c.checkpoint) for c in cells]
        flows = build_flows(models, corpus, labels, split, config.probe, track=config.split.track)
        flow_tables.append(flows)
        reports.append(detect_splits(flows))
    if not reports:
        raise UsageError("Split analysis needs at least two completed grid cells sharing one k")

    primary = reports[0]
    report = primary.model_dump(mode="json")
    report["plateau"] = [{"k": r.k, "split_latent_dim": r.split_latent_dim} for r in reports]
    return {
        "flows": write_json(out / "flows.json", to_sankey(flow_tables[0])),
        "flow_table": write_json(out / "flow_table.json", flow_tables[0]),
        "split_report": write_json(out / "split_report.json", report),
        "split_plateau": write_csv(out / "split_plateau.csv", split_plateau(reports)),
    }


def cmd_export(config: RunConfig, out: Path, args: argparse.Namespace) -> Dict[str, Path]:
    """Merge whatever stage outputs exist into report.json plus plot-ready CSVs"""
    export_dir = out / "export"
    sections: Dict[str, object] = {}
    written: Dict[str, Path] = {}

    summary_path = out / "grid" / "summary.csv"
    if summary_path.exists():
        heatmap = pd.read_csv(summary_path)
        heatmap = heatmap[heatmap["status"] == "completed"].reset_index(drop=True)
        sections["grid_heatmap"] = _records(heatmap)
        written["heatmap"] = write_csv(export_dir / "heatmap.csv", heatmap)

    probes = {}
    for path in sorted(out.glob("probe_*.json")):
        result = ProbeResult(**read_json(path))
        probes[result.positive_label] = {
            "latent_dim": result.latent_dim,
            "phi": result.phi,
            "precision": result.test.precision,
            "recall": result.test.recall,
            "zero_predictions": result.test.zero_predictions,
            "per_stratum": {k: v.model_dump() for k, v in result.test.per_stratum.items()},
        }
    if probes:
        sections["probe"] = probes

    means_frames, hist_frames = [], []
    for path in sorted(out.glob("steering_*.json")):
        report = SteeringReport(**read_json(path))
        means = report.means_table()
        means.insert(0, "attribute", report.positive_class)
        means_frames.append(means)
        hist = report.histogram_table()
        hist.insert(0, "attribute", report.positive_class)
        hist_frames.append(hist)
    if means_frames:
        means = pd.concat(means_frames, ignore_index=True)
        sections["steering_means"] = _records(means)
        written["steering_means"] = write_csv(export_dir / "steering_means.csv", means)
        hist = pd.concat(hist_frames, ignore_index=True)
        sections["histograms"] = _records(hist)
        written["histograms"] = write_csv(export_dir / "histograms.csv", hist)

    flows_path = out / "flows.json"
    if flows_path.exists():
        sankey = read_json(flows_path)
        sections["flows"] = sankey
        written["flows"] = write_csv(export_dir / "flows.csv", pd.DataFrame(
            sankey.get("links", []), columns=["source", "target", "group", "value"],
        ))

    gaps = [name for name in REPORT_SECTIONS if name not in sections]
    for name in gaps:
        logger.warning("Export: no data for section '%s'", name)
    written["report"] = write_json(out / "report.json", {"sections": sections, "gaps": gaps})
    return written


COMMANDS: Dict[str, Callable[[RunConfig, Path, argparse.Namespace], Dict[str, Path]]] = {
    "synth": cmd_synth,
    "train": cmd_train,
    "grid": cmd_grid,
    "probe": cmd_probe,
    "steer": cmd_steer,
    "split": cmd_split,
    "export": cmd_export,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Run configuration JSON")
    common.add_argument("--out", help="Output directory (overrides config and $LATENT_LENS_OUT)")
    common.add_argument("--seed", type=int, help="Global seed; also reseeds the synth section")
    common.add_argument("--workers", type=int, help="Parallel grid workers")
    common.add_argument("--verbose", action="store_true", help="Debug logging and progress bars")

    parser = argparse.ArgumentParser(prog="latent-lens", description="Sparse autoencoder feature analysis")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="Generate a synthetic corpus").add_argument(
        "--spec", help="Bare synthetic corpus spec JSON (takes precedence over the config's synth section)",
    )
    sub.add_parser("train", parents=[common], help="Train one SAE")
    sub.add_parser("grid", parents=[common], help="Train the (latent_dim, k) grid")
    sub.add_parser("probe", parents=[common], help="Find and evaluate feature indices")
    sub.add_parser("steer", parents=[common], help="Steer the probed feature")
    sub.add_parser("split", parents=[common], help="Track feature splitting across latent dims")
    sub.add_parser("export", parents=[common], help="Consolidate results into report.json")
    return parser


def setup_logging(verbose: bool) -> None:
    level = logging.DEBUG if verbose else logging.INFO
    env_level = os.getenv("LATENT_LENS_LOG_LEVEL")
    if env_level and isinstance(getattr(logging, env_level.upper(), None), int):
        level = getattr(logging, env_level.upper())
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def _fail(error: LatentLensError, code: int) -> int:
    logger.error("❌ %s: %s", type(error).__name__, error.message)
    print(json.dumps(error.to_dict(), ensure_ascii=False), file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    load_dotenv()
    setup_logging(args.verbose)
    started = time.time()
    try:
        config = load_run_config(
            args.config, {"seed": args.seed, "workers": args.workers, "verbose": args.verbose},
        )
        if config.verbose and not args.verbose:
            setup_logging(True)
        out = config.resolve_output(args.out)
        out.mkdir(parents=True, exist_ok=True)
        logger.info("Running '%s' out=%s seed=%d", args.command, out, config.seed)

        written = COMMANDS[args.command](config, out, args)
        write_run_meta(out, args.command, config, config.seed, started, argv)
        for name, path in written.items():
            logger.debug("wrote %s -> %s", name, path)
        logger.info("✓ '%s' finished in %.1fs", args.command, time.time() - started)
        return EXIT_OK
    except MissingArtifactError as e:
        return _fail(e, EXIT_MISSING_ARTIFACT)
    except (ConfigError, SpecError) as e:
        return _fail(e, EXIT_CONFIG_ERROR)
    except LatentLensError as e:
        return _fail(e, EXIT_MODULE_ERROR)
    except Exception as e:
        logger.exception("❌ Unexpected error in '%s'", args.command)
        print(json.dumps({"error": "InternalError", "message": str(e), "path": None}), file=sys.stderr)
        return EXIT_MODULE_ERROR


if __name__ == "__main__":
    sys.exit(main())
