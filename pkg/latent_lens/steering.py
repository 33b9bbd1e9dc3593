"""
FeatureSteering - overwrite one latent before decoding and measure how far the
reconstruction moves between two class centroids.

    deactivate:  v~[phi] = -a_phi     (applied to positive-class samples)
    activate:    v~[phi] = +a_phi     (applied to negative-class samples)
    delta_s(x) = cos(x, centroid_pos) - cos(x, centroid_neg)

Centroids are means of SAE *reconstructions* of the training samples.
"""
import logging
from typing import Dict, List, Literal, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from latent_lens.embedding_store import EmbeddingCorpus, LabelSet
from latent_lens.exceptions import NumericalError, ShapeError, UsageError
from latent_lens.sae_core import LatentVector, SaeModel, decode_batch, encode_batch

logger = logging.getLogger(__name__)

HIST_BINS = 40
HIST_RANGE = (-1.2, 1.2)


class SteerConfig(BaseModel):
    phi: int = Field(..., ge=0, description="Latent index to overwrite")
    a_phi: float = Field(default=1.0, gt=0.0, description="Steering magnitude")
    positive_class: str = "positive"
    negative_class: str = "negative"
    direction: Literal["activate", "deactivate"] = "deactivate"


class SteeringContext(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    centroid_pos: np.ndarray
    centroid_neg: np.ndarray
    source: str = Field(default="train", description="Which sample set the centroids came from")
    train_indices: List[int] = Field(default_factory=list, exclude=True)

    @model_validator(mode="after")
    def _usable(self):
        for name in ("centroid_pos", "centroid_neg"):
            c = getattr(self, name)
            if not np.isfinite(c).all():
                raise NumericalError(f"{name} is not finite")
            if np.linalg.norm(c) == 0:
                raise NumericalError(f"{name} is the zero vector")
        return self


class ClassMeans(BaseModel):
    count: int
    before: float
    after: float


class SampleShift(BaseModel):
    sample_id: str
    cls: str
    before: float
    after: float


class SteeringReport(BaseModel):
    phi: int
    a_phi: float
    positive_class: str
    negative_class: str
    centroid_pos: List[float]
    centroid_neg: List[float]
    samples: List[SampleShift]
    means: Dict[str, ClassMeans]
    bin_edges: List[float]
    histograms: Dict[str, List[int]] = Field(description="'<class>/<before|after>' -> bin counts")
    out_of_range: Dict[str, int] = Field(default_factory=dict)

    def means_table(self) -> pd.DataFrame:
        return pd.DataFrame([
            {"samples": f"{name} samples", "count": m.count,
             "before_steering": round(m.before, 3), "after_steering": round(m.after, 3)}
            for name, m in self.means.items()
        ], columns=["samples", "count", "before_steering", "after_steering"])

    def histogram_table(self) -> pd.DataFrame:
        edges = np.asarray(self.bin_edges)
        df = pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:]})
        for key, counts in self.histograms.items():
            df[key] = counts
        return df


def build_context(
    model: SaeModel,
    corpus: EmbeddingCorpus,
    labels: LabelSet,
    train_indices: Sequence[int],
) -> SteeringContext:
    """Class centroids of the SAE reconstructions over the training rows"""
    y = labels.label_vector(corpus)
    idx = np.asarray(train_indices, dtype=np.int64)
    pos = idx[y[idx] == 1]
    neg = idx[y[idx] == 0]
    if pos.size == 0 or neg.size == 0:
        missing = labels.positive_label if pos.size == 0 else f"not {labels.positive_label}"
        raise UsageError(f"No '{missing}' samples among the training rows")
    recon_pos = decode_batch(model, encode_batch(model, corpus.data[pos]))
    recon_neg = decode_batch(model, encode_batch(model, corpus.data[neg]))
    return SteeringContext(
        centroid_pos=recon_pos.mean(axis=0),
        centroid_neg=recon_neg.mean(axis=0),
        source="train",
        train_indices=[int(i) for i in idx],
    )


def steer_latent(v: LatentVector, config: SteerConfig) -> LatentVector:
    values = np.array(v.values, dtype=np.float64, copy=True)
    if config.phi >= values.shape[0]:
        raise ShapeError(f"phi={config.phi} outside latent_dim={values.shape[0]}")
    values[config.phi] = config.a_phi if config.direction == "activate" else -config.a_phi
    return LatentVector(values=values)


def _cosine_rows(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    x_norm = np.linalg.norm(x, axis=1)
    c_norm = np.linalg.norm(c)
    if np.any(x_norm == 0) or c_norm == 0:
        raise NumericalError("Cosine similarity undefined for a zero-norm vector")
    return (x @ c) / (x_norm * c_norm)


def relative_similarity(x: np.ndarray, ctx: SteeringContext) -> float:
    x = np.asarray(x, dtype=np.float64)
    x_norm = np.linalg.norm(x)
    if x_norm == 0:
        raise NumericalError("relative_similarity undefined for the zero vector")
    pos, neg = ctx.centroid_pos, ctx.centroid_neg
    return float(
        np.dot(x, pos) / (x_norm * np.linalg.norm(pos))
        - np.dot(x, neg) / (x_norm * np.linalg.norm(neg))
    )


def relative_similarity_batch(x: np.ndarray, ctx: SteeringContext) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return _cosine_rows(x, ctx.centroid_pos) - _cosine_rows(x, ctx.centroid_neg)


def run_steering(
    model: SaeModel,
    ctx: SteeringContext,
    corpus: EmbeddingCorpus,
    labels: LabelSet,
    test_indices: Sequence[int],
    config: SteerConfig,
) -> SteeringReport:
    """Deactivate phi on positive test samples, activate it on negative ones, score both"""
    if config.phi >= model.config.latent_dim:
        raise ShapeError(f"phi={config.phi} outside latent_dim={model.config.latent_dim}")
    overlap = set(int(i) for i in test_indices) & set(ctx.train_indices)
    if overlap:
        raise UsageError(f"Test row {min(overlap)} was used to build the centroids")

    y = labels.label_vector(corpus)
    idx = np.asarray(test_indices, dtype=np.int64)
    idx = idx[y[idx] >= 0]
    if idx.size == 0:
        raise UsageError("No labeled rows among the test indices")
    is_pos = y[idx] == 1

    z = encode_batch(model, corpus.data[idx])
    steered = z.copy()
    steered[is_pos, config.phi] = -config.a_phi
    steered[~is_pos, config.phi] = config.a_phi

    before = relative_similarity_batch(decode_batch(model, z), ctx)
    after = relative_similarity_batch(decode_batch(model, steered), ctx)

    edges = np.linspace(HIST_RANGE[0], HIST_RANGE[1], HIST_BINS + 1)
    means: Dict[str, ClassMeans] = {}
    histograms: Dict[str, List[int]] = {}
    out_of_range: Dict[str, int] = {}
    for name, mask in ((config.positive_class, is_pos), (config.negative_class, ~is_pos)):
        if not mask.any():
            continue
        means[name] = ClassMeans(
            count=int(mask.sum()), before=float(before[mask].mean()), after=float(after[mask].mean()),
        )
        for phase, values in (("before", before[mask]), ("after", after[mask])):
            key = f"{name}/{phase}"
            histograms[key] = np.histogram(values, bins=edges)[0].astype(int).tolist()
            out_of_range[key] = int(np.sum((values < edges[0]) | (values > edges[-1])))

    samples = [
        SampleShift(
            sample_id=corpus.sample_ids[i],
            cls=config.positive_class if p else config.negative_class,
            before=float(b),
            after=float(a),
        )
        for i, p, b, a in zip(idx, is_pos, before, after)
    ]
    for name, m in means.items():
        logger.info("✓ Steering '%s' mean delta_s %.3f -> %.3f (n=%d)", name, m.before, m.after, m.count)

    return SteeringReport(
        phi=config.phi,
        a_phi=config.a_phi,
        positive_class=config.positive_class,
        negative_class=config.negative_class,
        centroid_pos=ctx.centroid_pos.tolist(),
        centroid_neg=ctx.centroid_neg.tolist(),
        samples=samples,
        means=means,
        bin_edges=edges.tolist(),
        histograms=histograms,
        out_of_range=out_of_range,
    )
