"""
EmbeddingStore - corpus and label data models, the EMBC binary corpus format
and CSV label ingestion
"""
import io
import logging
import struct
from pathlib import Path
from typing import BinaryIO, Dict, List, Optional, Sequence, TextIO, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from latent_lens.artifacts import atomic_write_bytes, read_json, write_json
from latent_lens.exceptions import FormatError, MissingArtifactError, ValidationError

logger = logging.getLogger(__name__)

MAGIC = b"EMBC"
VERSION = 1
# magic, version, N, M, reserved
HEADER = struct.Struct("<4sIQII")
HAS_SAMPLE_IDS = 0x01
HAS_SPEAKER_IDS = 0x02

TRUE_TOKENS = {"1", "true"}
FALSE_TOKENS = {"0", "false"}


class EmbeddingCorpus(BaseModel):
    """N x M matrix of float32 embeddings with optional per-row ids"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray = Field(..., description="N x M float32 matrix, row-major")
    sample_ids: Optional[List[str]] = Field(default=None, description="Unique id per row")
    speaker_ids: Optional[List[str]] = Field(default=None, description="Speaker id per row")

    @model_validator(mode="before")
    @classmethod
    def _coerce_data(cls, values):
        if isinstance(values, dict) and "data" in values:
            data = np.ascontiguousarray(values["data"], dtype=np.float32)
            data.setflags(write=False)
            values = {**values, "data": data}
        return values

    @model_validator(mode="after")
    def _check_invariants(self):
        if self.data.ndim != 2:
            raise ValidationError(f"Corpus data must be 2-D, got shape {self.data.shape}")
        n, m = self.data.shape
        if m < 1:
            raise ValidationError("Corpus dimension must be positive")
        if n and not np.isfinite(self.data).all():
            bad_row = int(np.argwhere(~np.isfinite(self.data))[0][0])
            raise ValidationError(f"Non-finite value in corpus row {bad_row}")
        if self.sample_ids is not None:
            if len(self.sample_ids) != n:
                raise ValidationError(f"sample_ids has {len(self.sample_ids)} entries for {n} rows")
            if len(set(self.sample_ids)) != n:
                raise ValidationError("sample_ids must be unique")
        if self.speaker_ids is not None and len(self.speaker_ids) != n:
            raise ValidationError(f"speaker_ids has {len(self.speaker_ids)} entries for {n} rows")
        return self

    @property
    def count(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def index_map(self) -> Dict[str, int]:
        if self.sample_ids is None:
            raise ValidationError("Corpus carries no sample_ids; labels cannot be joined")
        return {sid: i for i, sid in enumerate(self.sample_ids)}

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingCorpus):
            return NotImplemented
        return (
            self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
            and self.sample_ids == other.sample_ids
            and self.speaker_ids == other.speaker_ids
        )

    __hash__ = None


class LabelSet(BaseModel):
    """Binary labels keyed by sample_id, with optional strata used only for split analysis"""

    positive_label: str = Field(..., min_length=1, description="Name of the positive class")
    labels: Dict[str, bool] = Field(..., description="sample_id -> is positive")
    strata: Optional[Dict[str, str]] = Field(default=None, description="sample_id -> stratum")

    @model_validator(mode="after")
    def _both_classes(self):
        if not self.labels:
            raise ValidationError(f"LabelSet '{self.positive_label}' has no labels")
        values = set(self.labels.values())
        if values != {True, False}:
            present = "positives" if True in values else "negatives"
            raise ValidationError(
                f"LabelSet '{self.positive_label}' needs both classes, found only {present}"
            )
        if self.strata:
            unknown = [sid for sid in self.strata if sid not in self.labels]
            if unknown:
                raise ValidationError(f"Stratum given for unlabeled sample '{unknown[0]}'")
        return self

    def label_vector(self, corpus: EmbeddingCorpus) -> np.ndarray:
        """Per-row label over the corpus: 1 positive, 0 negative, -1 unlabeled"""
        index = corpus.index_map()
        y = np.full(corpus.count, -1, dtype=np.int8)
        for sid, is_pos in self.labels.items():
            if sid not in index:
                raise ValidationError(f"Unknown sample_id '{sid}'")
            y[index[sid]] = 1 if is_pos else 0
        return y

    def stratum_vector(self, corpus: EmbeddingCorpus) -> List[Optional[str]]:
        out: List[Optional[str]] = [None] * corpus.count
        if not self.strata:
            return out
        index = corpus.index_map()
        for sid, stratum in self.strata.items():
            out[index[sid]] = stratum
        return out


class CorpusSplit(BaseModel):
    """Disjoint train/test row indices into one corpus"""

    train_indices: List[int] = Field(default_factory=list)
    test_indices: List[int] = Field(default_factory=list)

    @model_validator(mode="after")
    def _disjoint(self):
        overlap = set(self.train_indices) & set(self.test_indices)
        if overlap:
            raise ValidationError(f"Index {min(overlap)} appears in both train and test")
        if any(i < 0 for i in self.train_indices + self.test_indices):
            raise ValidationError("Split indices must be non-negative")
        return self

    def check_bounds(self, n: int) -> None:
        worst = max(self.train_indices + self.test_indices, default=-1)
        if worst >= n:
            raise ValidationError(f"Split index {worst} out of range for corpus of {n} rows")


# ---------------------------------------------------------------------------
# EMBC binary format
# ---------------------------------------------------------------------------

def _encode_ids(ids: Sequence[str]) -> bytes:
    chunks = []
    for item in ids:
        raw = item.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
    return b"".join(chunks)


def corpus_to_bytes(corpus: EmbeddingCorpus) -> bytes:
    header = HEADER.pack(MAGIC, VERSION, corpus.count, corpus.dim, 0)
    payload = corpus.data.astype("<f4", copy=False).tobytes(order="C")
    flag = (HAS_SAMPLE_IDS if corpus.sample_ids is not None else 0) | (
        HAS_SPEAKER_IDS if corpus.speaker_ids is not None else 0
    )
    parts = [header, payload]
    if flag:
        parts.append(struct.pack("<B", flag))
        if corpus.sample_ids is not None:
            parts.append(_encode_ids(corpus.sample_ids))
        if corpus.speaker_ids is not None:
            parts.append(_encode_ids(corpus.speaker_ids))
    return b"".join(parts)


def write_corpus(corpus: EmbeddingCorpus, destination: BinaryIO) -> None:
    """Emit the EMBC format to a binary sink"""
    destination.write(corpus_to_bytes(corpus))


def _decode_ids(buf: bytes, offset: int, n: int) -> tuple:
    ids = []
    for row in range(n):
        if offset + 4 > len(buf):
            raise FormatError(f"ID block truncated at entry {row}")
        (length,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if offset + length > len(buf):
            raise FormatError(f"ID block truncated at entry {row}")
        try:
            ids.append(buf[offset:offset + length].decode("utf-8"))
        except UnicodeDecodeError as e:
            raise FormatError(f"ID entry {row} is not valid UTF-8") from e
        offset += length
    return ids, offset


def corpus_from_bytes(buf: bytes) -> EmbeddingCorpus:
    if len(buf) < HEADER.size:
        raise FormatError(f"Stream too short for EMBC header ({len(buf)} bytes)")
    magic, version, n, m, reserved = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"Bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"Unsupported EMBC version {version}")
    if m < 1:
        raise FormatError("EMBC header declares zero dimension")
    if reserved != 0:
        raise FormatError("EMBC reserved header field is not zero")

    payload_len = n * m * 4
    end = HEADER.size + payload_len
    if end > len(buf):
        raise FormatError(
            f"Payload truncated: header declares {n}x{m} values, stream holds "
            f"{(len(buf) - HEADER.size) // 4}"
        )
    data = np.frombuffer(buf, dtype="<f4", count=n * m, offset=HEADER.size).astype(np.float32)
    data = data.reshape(n, m)

    sample_ids = speaker_ids = None
    if end < len(buf):
        flag = buf[end]
        if flag == 0 or flag & ~(HAS_SAMPLE_IDS | HAS_SPEAKER_IDS):
            raise FormatError(f"Invalid ID block flag {flag:#x}")
        offset = end + 1
        if flag & HAS_SAMPLE_IDS:
            sample_ids, offset = _decode_ids(buf, offset, n)
        if flag & HAS_SPEAKER_IDS:
            speaker_ids, offset = _decode_ids(buf, offset, n)
        if offset != len(buf):
            raise FormatError(f"{len(buf) - offset} trailing bytes after ID block")

    if not np.isfinite(data).all():
        bad_row = int(np.argwhere(~np.isfinite(data))[0][0])
        raise ValidationError(f"NaN or Inf in payload row {bad_row}")
    return EmbeddingCorpus(data=data, sample_ids=sample_ids, speaker_ids=speaker_ids)


def read_corpus(source: BinaryIO) -> EmbeddingCorpus:
    """Parse a complete EMBC stream"""
    return corpus_from_bytes(source.read())


def save_corpus(corpus: EmbeddingCorpus, path: Union[str, Path]) -> Path:
    path = atomic_write_bytes(path, corpus_to_bytes(corpus))
    logger.info("✓ Wrote corpus rows=%d dim=%d path=%s", corpus.count, corpus.dim, path)
    return path


def load_corpus(path: Union[str, Path]) -> EmbeddingCorpus:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"Corpus not found: {path}", path=str(path))
    try:
        with open(path, "rb") as f:
            corpus = read_corpus(f)
    except (FormatError, ValidationError) as e:
        e.path = str(path)
        raise
    logger.info("✓ Loaded corpus rows=%d dim=%d path=%s", corpus.count, corpus.dim, path)
    return corpus


def subset(corpus: EmbeddingCorpus, indices: Sequence[int]) -> EmbeddingCorpus:
    idx = np.asarray(indices, dtype=np.int64)
    return EmbeddingCorpus(
        data=corpus.data[idx],
        sample_ids=[corpus.sample_ids[i] for i in idx] if corpus.sample_ids is not None else None,
        speaker_ids=[corpus.speaker_ids[i] for i in idx] if corpus.speaker_ids is not None else None,
    )


# ---------------------------------------------------------------------------
# Label CSV
# ---------------------------------------------------------------------------

def _parse_label(token: str, line_no: int) -> bool:
    value = token.strip().lower()
    if value in TRUE_TOKENS:
        return True
    if value in FALSE_TOKENS:
        return False
    raise ValidationError(f"Unparsable label '{token}' on line {line_no}")


def read_labels(source: TextIO, corpus: EmbeddingCorpus, positive_label: str = "positive") -> LabelSet:
    """Parse a ``sample_id,label[,stratum]`` CSV and join it against the corpus"""
    try:
        df = pd.read_csv(source, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as e:
        raise ValidationError("Label file is empty") from e

    columns = list(df.columns)
    if columns[:2] != ["sample_id", "label"] or len(columns) > 3 or (
        len(columns) == 3 and columns[2] != "stratum"
    ):
        raise ValidationError(f"Label header must be sample_id,label[,stratum], got {','.join(columns)}")

    index = corpus.index_map()
    labels: Dict[str, bool] = {}
    strata: Dict[str, str] = {}
    for row_no, row in enumerate(df.itertuples(index=False)):
        line_no = row_no + 2
        sid = row.sample_id.strip()
        if sid not in index:
            raise ValidationError(f"Unknown sample_id '{sid}' on line {line_no}")
        if sid in labels:
            raise ValidationError(f"Duplicate sample_id '{sid}' on line {line_no}")
        labels[sid] = _parse_label(row.label, line_no)
        if len(columns) == 3 and row.stratum.strip():
            strata[sid] = row.stratum.strip()

    return LabelSet(positive_label=positive_label, labels=labels, strata=strata or None)


def write_labels(labelset: LabelSet, sink: TextIO) -> None:
    df = pd.DataFrame({
        "sample_id": list(labelset.labels.keys()),
        "label": [int(v) for v in labelset.labels.values()],
    })
    if labelset.strata:
        df["stratum"] = [labelset.strata.get(sid, "") for sid in df["sample_id"]]
    df.to_csv(sink, index=False, lineterminator="\n")


def load_labels(path: Union[str, Path], corpus: EmbeddingCorpus, positive_label: str) -> LabelSet:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"Label file not found: {path}", path=str(path))
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            return read_labels(f, corpus, positive_label)
    except ValidationError as e:
        e.path = str(path)
        raise


def save_labels(labelset: LabelSet, path: Union[str, Path]) -> Path:
    buf = io.StringIO()
    write_labels(labelset, buf)
    return atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def make_split(
    n: int,
    test_fraction: float,
    seed: int,
    label_vector: Optional[np.ndarray] = None,
) -> CorpusSplit:
    """Deterministic shuffled split; stratified on ``label_vector`` when given"""
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    groups = np.zeros(n, dtype=np.int8) if label_vector is None else np.asarray(label_vector)

    train: List[int] = []
    test: List[int] = []
    for value in np.unique(groups):
        members = np.flatnonzero(groups == value)
        members = members[rng.permutation(len(members))]
        n_test = int(round(test_fraction * len(members)))
        if len(members) >= 2:
            n_test = min(max(n_test, 1), len(members) - 1)
        test.extend(int(i) for i in members[:n_test])
        train.extend(int(i) for i in members[n_test:])
    return CorpusSplit(train_indices=sorted(train), test_indices=sorted(test))


def save_split(split: CorpusSplit, path: Union[str, Path]) -> Path:
    return write_json(path, split)


def load_split(path: Union[str, Path]) -> CorpusSplit:
    return CorpusSplit(**read_json(path))
