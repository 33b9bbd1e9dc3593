"""
Synthetic embedding corpora with planted binary attributes.

Each sample is a unit-norm speaker base vector, plus ``strength * direction``
for every attribute active on that sample, plus isotropic Gaussian noise.
An attribute realized by two subcomponents uses one of two orthogonal
directions per sample, which is what the splitting analysis looks for;
``shared_strength`` adds a third direction common to both subcomponents.

Background features are unlabeled sparse directions that occupy latents
alongside the planted attributes.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from latent_lens.artifacts import write_json
from latent_lens.embedding_store import EmbeddingCorpus, LabelSet, save_corpus, save_labels
from latent_lens.exceptions import SpecError, ValidationError

logger = logging.getLogger(__name__)

RANK_TOLERANCE = 1e-10


class PlantedAttribute(BaseModel):
    """Binary attribute realized by one or two orthogonal directions"""

    name: str = Field(..., min_length=1, pattern=r"^[A-Za-z0-9_\-]+$")
    prevalence: float = Field(..., gt=0.0, lt=1.0, description="P(attribute active)")
    strength: float = Field(default=1.0, ge=0.0, description="Length of the planted offset")
    n_subcomponents: int = Field(default=1, ge=1, le=2)
    subcomponent_mix: Optional[float] = Field(
        default=None, gt=0.0, lt=1.0, description="P(subcomponent 1 | attribute active)"
    )
    subcomponent_names: List[str] = Field(default_factory=lambda: ["a", "b"])
    shared_strength: float = Field(
        default=0.0, ge=0.0, description="Offset along a direction common to every positive"
    )
    directions: Optional[List[List[float]]] = Field(
        default=None, description="Explicit directions; drawn at random when omitted"
    )

    @model_validator(mode="after")
    def _check_subcomponents(self):
        if self.n_subcomponents == 2 and self.subcomponent_mix is None:
            raise ValueError(f"attribute '{self.name}': subcomponent_mix is required with 2 subcomponents")
        if len(self.subcomponent_names) < self.n_subcomponents:
            raise ValueError(f"attribute '{self.name}': needs {self.n_subcomponents} subcomponent_names")
        if self.directions is not None and len(self.directions) != self.n_subcomponents:
            raise ValueError(f"attribute '{self.name}': expected {self.n_subcomponents} directions")
        return self


class SynthSpec(BaseModel):
    dim: int = Field(..., gt=0, description="Embedding dimensionality M")
    n_samples: int = Field(..., ge=0, description="Number of samples N")
    n_speakers: int = Field(..., gt=0)
    attributes: List[PlantedAttribute] = Field(default_factory=list)
    noise_sigma: float = Field(default=0.1, ge=0.0)
    background_features: int = Field(default=0, ge=0, description="Unlabeled sparse directions")
    background_prevalence: float = Field(default=0.05, gt=0.0, lt=1.0)
    background_strength: float = Field(default=1.0, ge=0.0)
    seed: int = Field(default=42, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _unique_names(self):
        names = [a.name for a in self.attributes]
        if len(names) != len(set(names)):
            raise ValueError("attribute names must be unique")
        for attr in self.attributes:
            if attr.directions is not None and any(len(d) != self.dim for d in attr.directions):
                raise ValueError(f"attribute '{attr.name}': directions must have length {self.dim}")
        return self


class GroundTruth(BaseModel):
    """Per-sample record of which attributes and subcomponents were planted"""

    sample_ids: List[str]
    speaker_index: List[int]
    active: Dict[str, List[bool]]
    subcomponent: Dict[str, List[int]] = Field(description="-1 where the attribute is inactive")
    directions: Dict[str, List[List[float]]]
    shared_directions: Dict[str, List[float]] = Field(default_factory=dict)
    background_count: List[int] = Field(default_factory=list, description="Active background features per sample")


class SynthResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    corpus: EmbeddingCorpus
    labels: Dict[str, LabelSet]
    ground_truth: GroundTruth

    def save(self, out_dir: Union[str, Path]) -> Dict[str, Path]:
        out_dir = Path(out_dir)
        written = {"corpus": save_corpus(self.corpus, out_dir / "corpus.embc")}
        for name, labelset in self.labels.items():
            written[f"labels_{name}"] = save_labels(labelset, out_dir / f"labels_{name}.csv")
        written["ground_truth"] = write_json(out_dir / "ground_truth.json", self.ground_truth)
        return written


def orthogonalize(directions: List[np.ndarray]) -> List[np.ndarray]:
    """Modified Gram-Schmidt with one re-orthogonalization pass"""
    if not directions:
        return []
    vectors = [np.asarray(d, dtype=np.float64).ravel() for d in directions]
    dim = vectors[0].shape[0]
    if any(v.shape[0] != dim for v in vectors):
        raise SpecError("Directions must share one dimensionality")
    if len(vectors) > dim:
        raise SpecError(f"Cannot orthogonalize {len(vectors)} directions in {dim} dimensions")

    basis: List[np.ndarray] = []
    for i, v in enumerate(vectors):
        norm0 = np.linalg.norm(v)
        if norm0 == 0:
            raise SpecError(f"Direction {i} is the zero vector")
        w = v.copy()
        for _ in range(2):
            for b in basis:
                w -= np.dot(b, w) * b
        norm = np.linalg.norm(w)
        if norm <= RANK_TOLERANCE * norm0:
            raise SpecError(f"Direction {i} is linearly dependent on the preceding directions")
        basis.append(w / norm)
    return basis


def generate(spec: SynthSpec) -> SynthResult:
    """Draw a corpus, one LabelSet per attribute and the ground truth; pure function of ``spec``"""
    rng = np.random.default_rng(spec.seed)
    m, n = spec.dim, spec.n_samples

    raw = []
    for attr in spec.attributes:
        for j in range(attr.n_subcomponents):
            if attr.directions is not None:
                raw.append(np.asarray(attr.directions[j], dtype=np.float64))
            else:
                raw.append(rng.standard_normal(m))
        if attr.shared_strength > 0:
            raw.append(rng.standard_normal(m))
    raw.extend(rng.standard_normal(m) for _ in range(spec.background_features))
    basis = orthogonalize(raw)

    bases = rng.standard_normal((spec.n_speakers, m))
    bases /= np.linalg.norm(bases, axis=1, keepdims=True)
    speaker = rng.integers(0, spec.n_speakers, size=n)
    data = bases[speaker].copy()

    sample_ids = [f"s{i:06d}" for i in range(n)]
    active: Dict[str, List[bool]] = {}
    subcomponent: Dict[str, List[int]] = {}
    directions: Dict[str, List[List[float]]] = {}
    shared_directions: Dict[str, List[float]] = {}
    labels: Dict[str, LabelSet] = {}

    cursor = 0
    for attr in spec.attributes:
        dirs = basis[cursor:cursor + attr.n_subcomponents]
        cursor += attr.n_subcomponents
        on = rng.random(n) < attr.prevalence
        if attr.n_subcomponents == 2:
            sub = np.where(rng.random(n) < attr.subcomponent_mix, 0, 1)
        else:
            sub = np.zeros(n, dtype=np.int64)
        offsets = np.stack(dirs)[sub] * attr.strength
        if attr.shared_strength > 0:
            shared = basis[cursor]
            cursor += 1
            offsets = offsets + shared * attr.shared_strength
            shared_directions[attr.name] = shared.tolist()
        data += offsets * on[:, None]

        sub_record = np.where(on, sub, -1)
        active[attr.name] = [bool(x) for x in on]
        subcomponent[attr.name] = [int(x) for x in sub_record]
        directions[attr.name] = [d.tolist() for d in dirs]

        strata = None
        if attr.n_subcomponents == 2:
            strata = {
                sample_ids[i]: attr.subcomponent_names[int(sub[i])] for i in np.flatnonzero(on)
            }
        try:
            labels[attr.name] = LabelSet(
                positive_label=attr.name,
                labels={sid: bool(flag) for sid, flag in zip(sample_ids, on)},
                strata=strata,
            )
        except ValidationError as e:
            raise SpecError(f"Attribute '{attr.name}' produced a single class: {e.message}") from e

    background = np.zeros(n, dtype=np.int64)
    if spec.background_features:
        bg_dirs = np.stack(basis[cursor:cursor + spec.background_features])
        bg_on = rng.random((n, spec.background_features)) < spec.background_prevalence
        data += (bg_on * spec.background_strength) @ bg_dirs
        background = bg_on.sum(axis=1)

    if spec.noise_sigma > 0:
        data += rng.standard_normal((n, m)) * spec.noise_sigma

    corpus = EmbeddingCorpus(
        data=data.reshape(n, m).astype(np.float32),
        sample_ids=sample_ids,
        speaker_ids=[f"spk{j:05d}" for j in speaker],
    )
    ground_truth = GroundTruth(
        sample_ids=sample_ids,
        speaker_index=[int(j) for j in speaker],
        active=active,
        subcomponent=subcomponent,
        directions=directions,
        shared_directions=shared_directions,
        background_count=[int(c) for c in background],
    )
    logger.info(
        "✓ Generated synthetic corpus rows=%d dim=%d speakers=%d attributes=%s seed=%d",
        n, m, spec.n_speakers, [a.name for a in spec.attributes], spec.seed,
    )
    return SynthResult(corpus=corpus, labels=labels, ground_truth=ground_truth)


def standard_spec(seed: int = 42) -> SynthSpec:
    """The standard synthetic corpus: two independent attributes over 200 speakers"""
    return SynthSpec(
        dim=64,
        n_samples=20000,
        n_speakers=200,
        noise_sigma=0.1,
        seed=seed,
        attributes=[
            PlantedAttribute(name="spanish", prevalence=0.4, strength=2.0),
            PlantedAttribute(name="music", prevalence=0.2, strength=2.0),
        ],
    )


def splitting_spec(seed: int = 7) -> SynthSpec:
    """One attribute planted as two orthogonal subcomponents over a shared offset, for split detection.

    96 background features outrank the gain of splitting the attribute but not
    the attribute itself: below about 100 latents the subcomponents share one
    latent, above it they get their own.
    """
    return SynthSpec(
        dim=128,
        n_samples=12000,
        n_speakers=150,
        noise_sigma=0.02,
        background_features=96,
        background_prevalence=0.03,
        background_strength=4.0,
        seed=seed,
        attributes=[
            PlantedAttribute(
                name="spanish",
                prevalence=0.3,
                strength=1.5,
                shared_strength=1.5,
                n_subcomponents=2,
                subcomponent_mix=0.4,
                subcomponent_names=["male", "female"],
            ),
        ],
    )
