"""
SplitAnalyzer - follows the positive samples of one attribute through models
of growing latent dimension and reports where the attribute's single feature
index splits into per-stratum indices.

Dominant index of a stratum = probe phi fitted on that stratum's positives vs
all negatives. In each model a tracked sample is routed to whichever of the
model's candidate indices (overall phi plus every stratum phi) fires hardest
for it, or to "none" when none fires.
"""
import logging
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from latent_lens.embedding_store import CorpusSplit, EmbeddingCorpus, LabelSet
from latent_lens.exceptions import LatentLensError, ShapeError, UsageError
from latent_lens.probe import ProbeConfig, fit_probe
from latent_lens.sae_core import SaeModel, encode_batch

logger = logging.getLogger(__name__)

NONE_NODE = "none"
UNKNOWN_STRATUM = "unknown"


class RankedIndices(BaseModel):
    phi: int
    indices: List[int]
    weights: List[float]


class FlowCell(BaseModel):
    latent_dim: int
    k: Optional[int]
    phi: int
    stratum_phi: Dict[str, int] = Field(default_factory=dict)
    stratum_purity: Dict[str, float] = Field(
        default_factory=dict,
        description="Share of tracked positives firing on the stratum's index that belong to it",
    )
    candidates: List[int] = Field(default_factory=list)


class FlowEdge(BaseModel):
    source_cell: int
    source_index: str
    target_cell: int
    target_index: str
    group: str = Field(description="'<label>/<stratum>'")
    count: int


class FlowTable(BaseModel):
    positive_label: str
    cells: List[FlowCell]
    sample_ids: List[str]
    strata: List[str]
    assignments: List[List[str]] = Field(description="Per cell, per tracked sample: index or 'none'")
    flows: List[FlowEdge]


class SplitEvent(BaseModel):
    from_latent_dim: Optional[int]
    to_latent_dim: int
    stratum_indices: Dict[str, int]
    stratum_purity: Dict[str, float]


class SplitCellSummary(BaseModel):
    latent_dim: int
    k: Optional[int]
    dominant: Dict[str, int]
    purity: Dict[str, float]
    divergent: bool


class SplitReport(BaseModel):
    attribute: str
    k: Optional[int]
    cells: List[SplitCellSummary]
    events: List[SplitEvent]
    split_latent_dim: Optional[int] = None


def _model_k(model: SaeModel) -> Optional[int]:
    return getattr(model.config.activation, "k", None)


def top_indices(
    model: SaeModel,
    corpus: EmbeddingCorpus,
    labels: LabelSet,
    split: CorpusSplit,
    n: int,
    config: Optional[ProbeConfig] = None,
) -> RankedIndices:
    """The ``n`` latents with the largest probe weights, descending"""
    if not 1 <= n <= model.config.latent_dim:
        raise UsageError(f"n={n} must be within [1, {model.config.latent_dim}]")
    result = fit_probe(model, corpus, labels, split, config or ProbeConfig())
    weights = np.asarray(result.weights)
    order = np.argsort(-weights, kind="stable")[:n]
    return RankedIndices(
        phi=result.phi,
        indices=[int(i) for i in order],
        weights=[float(weights[i]) for i in order],
    )


def stratum_labels(labels: LabelSet, stratum: str) -> LabelSet:
    """Positives of one stratum against every negative"""
    strata = labels.strata or {}
    return LabelSet(
        positive_label=f"{labels.positive_label}/{stratum}",
        labels={
            sid: is_pos for sid, is_pos in labels.labels.items()
            if not is_pos or strata.get(sid) == stratum
        },
    )


def _tracked_rows(labels: LabelSet, corpus: EmbeddingCorpus, split: CorpusSplit, track: str) -> np.ndarray:
    y = labels.label_vector(corpus)
    if track == "test":
        rows = np.asarray(split.test_indices, dtype=np.int64)
    elif track == "train":
        rows = np.asarray(split.train_indices, dtype=np.int64)
    else:
        rows = np.arange(corpus.count)
    return rows[y[rows] == 1]


def build_flows(
    models: Sequence[SaeModel],
    corpus: EmbeddingCorpus,
    labels: LabelSet,
    split: CorpusSplit,
    config: Optional[ProbeConfig] = None,
    track: Literal["test", "train", "all"] = "test",
) -> FlowTable:
    """Route each tracked positive sample through every model and count transitions"""
    config = config or ProbeConfig()
    if len(models) < 2:
        raise UsageError("build_flows needs at least two models")
    ks = {_model_k(m) for m in models}
    if len(ks) != 1:
        raise UsageError(f"Models must share one k, got {sorted(ks, key=str)}")
    dims = [m.config.latent_dim for m in models]
    if any(b < a for a, b in zip(dims, dims[1:])):
        raise UsageError(f"Models must be ordered by non-decreasing latent_dim, got {dims}")
    for m in models:
        if m.config.input_dim != corpus.dim:
            raise ShapeError(f"Model expects dim {m.config.input_dim}, corpus has {corpus.dim}")

    rows = _tracked_rows(labels, corpus, split, track)
    if rows.size == 0:
        raise UsageError(f"No positive '{labels.positive_label}' samples to track")
    strata_all = labels.stratum_vector(corpus)
    row_strata = [strata_all[i] or UNKNOWN_STRATUM for i in rows]
    stratum_names = sorted({s for s in (labels.strata or {}).values()})

    cells: List[FlowCell] = []
    assignments: List[List[str]] = []
    for model in models:
        phi = fit_probe(model, corpus, labels, split, config).phi
        stratum_phi: Dict[str, int] = {}
        for name in stratum_names:
            try:
                stratum_phi[name] = fit_probe(model, corpus, stratum_labels(labels, name), split, config).phi
            except LatentLensError as e:
                logger.warning("No dominant index for stratum '%s' at L=%d: %s", name, model.config.latent_dim, e)

        candidates = sorted({phi, *stratum_phi.values()})
        full = encode_batch(model, corpus.data[rows])
        z = full[:, candidates]
        best = np.argmax(z, axis=1)  # lowest candidate index wins ties
        fired = z[np.arange(len(rows)), best] > 0
        assignments.append([
            str(candidates[b]) if ok else NONE_NODE for b, ok in zip(best, fired)
        ])

        purity: Dict[str, float] = {}
        for name, index in stratum_phi.items():
            firing = full[:, index] > 0
            total = int(firing.sum())
            own = sum(1 for f, s in zip(firing, row_strata) if f and s == name)
            purity[name] = own / total if total else 0.0

        cells.append(FlowCell(
            latent_dim=model.config.latent_dim, k=_model_k(model), phi=phi,
            stratum_phi=stratum_phi, stratum_purity=purity, candidates=candidates,
        ))
        logger.info(
            "L=%d phi=%d stratum_phi=%s purity=%s",
            model.config.latent_dim, phi, stratum_phi, {k: round(v, 3) for k, v in purity.items()},
        )

    group = [f"{labels.positive_label}/{s}" for s in row_strata]
    flows: List[FlowEdge] = []
    for i in range(len(cells) - 1):
        df = pd.DataFrame({"source": assignments[i], "target": assignments[i + 1], "group": group})
        counted = df.groupby(["source", "target", "group"], sort=True).size().reset_index(name="count")
        flows.extend(
            FlowEdge(
                source_cell=i, source_index=r.source, target_cell=i + 1,
                target_index=r.target, group=r.group, count=int(r.count),
            )
            for r in counted.itertuples(index=False)
        )

    return FlowTable(
        positive_label=labels.positive_label,
        cells=cells,
        sample_ids=[corpus.sample_ids[i] for i in rows],
        strata=row_strata,
        assignments=assignments,
        flows=flows,
    )


def detect_splits(flows: FlowTable) -> SplitReport:
    """Cells where strata stop sharing one dominant index; split L is the first such cell"""
    summaries: List[SplitCellSummary] = []
    events: List[SplitEvent] = []
    for cell in flows.cells:
        divergent = len(cell.stratum_phi) >= 2 and len(set(cell.stratum_phi.values())) > 1
        summary = SplitCellSummary(
            latent_dim=cell.latent_dim, k=cell.k, dominant=dict(cell.stratum_phi),
            purity=dict(cell.stratum_purity), divergent=divergent,
        )
        # events only move to a strictly larger L; repeated dims compare against the last smaller one
        previous = next((s for s in reversed(summaries) if s.latent_dim < cell.latent_dim), None)
        repeated = bool(events) and events[-1].to_latent_dim == cell.latent_dim
        if divergent and not repeated and (previous is None or not previous.divergent):
            events.append(SplitEvent(
                from_latent_dim=previous.latent_dim if previous else None,
                to_latent_dim=cell.latent_dim,
                stratum_indices=dict(cell.stratum_phi),
                stratum_purity=dict(cell.stratum_purity),
            ))
        summaries.append(summary)

    divergent_dims = [s.latent_dim for s in summaries if s.divergent]
    report = SplitReport(
        attribute=flows.positive_label,
        k=flows.cells[0].k if flows.cells else None,
        cells=summaries,
        events=events,
        split_latent_dim=min(divergent_dims) if divergent_dims else None,
    )
    if report.split_latent_dim is not None:
        logger.info("✓ '%s' splits at L=%d", report.attribute, report.split_latent_dim)
    else:
        logger.info("No split detected for '%s'", report.attribute)
    return report


def split_plateau(reports: Sequence[SplitReport]) -> pd.DataFrame:
    """Split latent dimension as a function of k"""
    rows = [{"k": r.k, "split_latent_dim": r.split_latent_dim} for r in reports]
    return pd.DataFrame(rows, columns=["k", "split_latent_dim"]).sort_values("k").reset_index(drop=True)


def to_sankey(flows: FlowTable) -> Dict:
    """Nodes + weighted links, ready for a Sankey plot.

    Nodes are keyed by (cell position, index) so two models with the same
    latent_dim still get separate columns.
    """
    node_map: Dict[Tuple[int, str], int] = {}
    nodes = []
    for cell_no, assigned in enumerate(flows.assignments):
        for index in sorted(set(assigned), key=lambda s: (s == NONE_NODE, int(s) if s != NONE_NODE else 0)):
            node_map[(cell_no, index)] = len(nodes)
            nodes.append({
                "id": len(nodes),
                "label": f"L{flows.cells[cell_no].latent_dim}:{index}",
                "cell": cell_no,
            })

    edges = pd.DataFrame([
        {"source": node_map[(e.source_cell, e.source_index)],
         "target": node_map[(e.target_cell, e.target_index)],
         "group": e.group, "value": e.count}
        for e in flows.flows
    ], columns=["source", "target", "group", "value"])
    links = [
        {"source": int(r.source), "target": int(r.target), "group": r.group, "value": int(r.value)}
        for r in edges.itertuples(index=False)
    ]
    return {
        "attribute": flows.positive_label,
        "nodes": nodes,
        "links": links,
        "metadata": {
            "tracked_samples": len(flows.sample_ids),
            "total_volume": int(edges["value"].sum()) if len(edges) else 0,
        },
    }


def flow_totals(flows: FlowTable) -> List[Tuple[int, int]]:
    """Per transition: (sum of outgoing counts, tracked samples)"""
    totals = []
    for i in range(len(flows.cells) - 1):
        totals.append((sum(e.count for e in flows.flows if e.source_cell == i), len(flows.sample_ids)))
    return totals
