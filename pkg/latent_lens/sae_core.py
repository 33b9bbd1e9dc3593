"""
SaeCore - the sparse autoencoder: parameters, TopK / ReLU activations,
forward pass, analytic gradients, Adam training and dead-latent tracking.

Parameters are stored as float32 (that is what the checkpoint holds); all
arithmetic runs in float64 on copies.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Annotated, Dict, List, Literal, Optional, Set, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic import ValidationError as PydanticValidationError
from tqdm import tqdm

from latent_lens.artifacts import atomic_write_bytes
from latent_lens.embedding_store import EmbeddingCorpus
from latent_lens.exceptions import (
    FormatError,
    MissingArtifactError,
    ShapeError,
    TrainingError,
    UsageError,
    ValidationError,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SAEC"
CHECKPOINT_VERSION = 1
PARAM_ORDER = ("enc_weight", "enc_bias", "dec_weight", "dec_bias", "input_mean")
TRAINABLE = ("enc_weight", "enc_bias", "dec_weight", "dec_bias")
ENCODE_CHUNK = 4096


class TopKActivation(BaseModel):
    kind: Literal["topk"] = "topk"
    k: int = Field(..., gt=0, description="Number of latents kept per sample")


class ReluActivation(BaseModel):
    kind: Literal["relu"] = "relu"
    l1_lambda: float = Field(default=1e-3, ge=0.0, description="L1 penalty on latent magnitudes")


Activation = Annotated[Union[TopKActivation, ReluActivation], Field(discriminator="kind")]


class SaeConfig(BaseModel):
    """Architecture and optimizer settings for one autoencoder"""

    input_dim: int = Field(..., gt=0, description="Embedding dimensionality M")
    latent_dim: int = Field(..., gt=0, description="Latent dimensionality L")
    activation: Activation = Field(default_factory=lambda: TopKActivation(k=20))
    learning_rate: float = Field(default=1e-3, gt=0.0)
    batch_size: int = Field(default=256, gt=0)
    epochs: int = Field(default=20, ge=0)
    seed: int = Field(default=0, ge=0, lt=2**64)
    center_inputs: bool = True

    @model_validator(mode="after")
    def _k_fits(self):
        if isinstance(self.activation, TopKActivation) and self.activation.k > self.latent_dim:
            raise ValueError(f"TopK k={self.activation.k} exceeds latent_dim={self.latent_dim}")
        return self


class SaeModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    enc_weight: np.ndarray
    enc_bias: np.ndarray
    dec_weight: np.ndarray
    dec_bias: np.ndarray
    input_mean: np.ndarray
    config: SaeConfig

    @model_validator(mode="before")
    @classmethod
    def _as_float32(cls, values):
        if isinstance(values, dict):
            values = dict(values)
            for name in PARAM_ORDER:
                if name in values:
                    arr = np.ascontiguousarray(values[name], dtype=np.float32)
                    arr.setflags(write=False)
                    values[name] = arr
        return values

    @model_validator(mode="after")
    def _check_shapes(self):
        m, l = self.config.input_dim, self.config.latent_dim
        expected = {
            "enc_weight": (l, m),
            "enc_bias": (l,),
            "dec_weight": (m, l),
            "dec_bias": (m,),
            "input_mean": (m,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.isfinite(arr).all():
                raise ValidationError(f"{name} contains non-finite values")
        return self

    def params(self) -> Dict[str, np.ndarray]:
        """float64 working copies of every parameter"""
        return {name: getattr(self, name).astype(np.float64) for name in PARAM_ORDER}

    def __eq__(self, other) -> bool:
        if not isinstance(other, SaeModel):
            return NotImplemented
        return self.config == other.config and all(
            getattr(self, n).tobytes() == getattr(other, n).tobytes() for n in PARAM_ORDER
        )

    __hash__ = None


class LatentVector(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


class TrainStats(BaseModel):
    train_mse: List[float] = Field(default_factory=list, description="Per-epoch training MSE")
    val_mse: List[float] = Field(default_factory=list, description="Per-epoch validation MSE")
    dead_latents: List[int] = Field(default_factory=list, description="Per-epoch dead-latent count")
    mean_l0: List[float] = Field(default_factory=list, description="Per-epoch mean active latents")
    epochs_completed: int = 0
    initial_val_mse: float = 0.0
    final_val_mse: float = 0.0
    final_dead_latents: int = 0
    firing_frequency: List[float] = Field(
        default_factory=list, description="Fraction of training samples on which each latent fires"
    )


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def activate(pre: np.ndarray, activation) -> Tuple[np.ndarray, np.ndarray]:
    """Apply the activation row-wise; returns (latents, gate mask)"""
    if isinstance(activation, TopKActivation):
        k = activation.k
        # stable sort on the negated values: among equal values the lowest index wins
        order = np.argsort(-pre, axis=-1, kind="stable")[..., :k]
        mask = np.zeros(pre.shape, dtype=bool)
        np.put_along_axis(mask, order, True, axis=-1)
    else:
        mask = pre > 0
    return np.where(mask, pre, 0.0), mask


def _pre_activation(params: Dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    return (x - params["input_mean"]) @ params["enc_weight"].T + params["enc_bias"]


def _check_input(model: SaeModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.config.input_dim:
        raise ShapeError(f"Input has dimension {x.shape[-1]}, model expects {model.config.input_dim}")
    return x


def encode_batch(model: SaeModel, x: np.ndarray) -> np.ndarray:
    """Latents for every row of ``x`` (N x M) -> N x L float64"""
    x = _check_input(model, np.atleast_2d(x))
    params = model.params()
    out = np.empty((x.shape[0], model.config.latent_dim), dtype=np.float64)
    for start in range(0, x.shape[0], ENCODE_CHUNK):
        chunk = x[start:start + ENCODE_CHUNK]
        out[start:start + len(chunk)] = activate(_pre_activation(params, chunk), model.config.activation)[0]
    return out


def decode_batch(model: SaeModel, v: np.ndarray) -> np.ndarray:
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    if v.shape[-1] != model.config.latent_dim:
        raise ShapeError(f"Latent has dimension {v.shape[-1]}, model expects {model.config.latent_dim}")
    params = model.params()
    return v @ params["dec_weight"].T + params["dec_bias"] + params["input_mean"]


def encode(model: SaeModel, e: np.ndarray) -> LatentVector:
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 1:
        raise ShapeError(f"encode expects a single vector, got shape {e.shape}")
    if not np.isfinite(e).all():
        raise ValidationError("Embedding contains non-finite values")
    return LatentVector(values=encode_batch(model, e[None, :])[0])


def decode(model: SaeModel, v: Union[LatentVector, np.ndarray]) -> np.ndarray:
    values = v.values if isinstance(v, LatentVector) else np.asarray(v, dtype=np.float64)
    if values.ndim != 1:
        raise ShapeError(f"decode expects a single latent vector, got shape {values.shape}")
    return decode_batch(model, values[None, :])[0]


def reconstruct(model: SaeModel, x: np.ndarray) -> np.ndarray:
    return decode_batch(model, encode_batch(model, x))


def mse(model: SaeModel, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise UsageError("Cannot compute MSE of an empty set")
    return float(np.mean((reconstruct(model, x) - x) ** 2))


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------

def loss_and_grads(
    params: Dict[str, np.ndarray], batch: np.ndarray, activation
) -> Tuple[float, Dict[str, np.ndarray], float]:
    """Loss, gradients for the trainable parameters, and the MSE term alone.

    The TopK mask / ReLU gate is held constant in the backward pass.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise UsageError("loss requires a non-empty 2-D batch")
    b, m = x.shape

    xc = x - params["input_mean"]
    pre = xc @ params["enc_weight"].T + params["enc_bias"]
    v, mask = activate(pre, activation)
    recon = v @ params["dec_weight"].T + params["dec_bias"] + params["input_mean"]
    diff = recon - x

    mse_term = float(np.sum(diff * diff) / (b * m))
    total = mse_term

    d_recon = 2.0 * diff / (b * m)
    grads = {
        "dec_weight": d_recon.T @ v,
        "dec_bias": d_recon.sum(axis=0),
    }
    d_v = d_recon @ params["dec_weight"]
    if isinstance(activation, ReluActivation) and activation.l1_lambda > 0:
        total += activation.l1_lambda * float(np.abs(v).sum() / b)
        d_v = d_v + activation.l1_lambda * np.sign(v) / b
    d_pre = d_v * mask
    grads["enc_weight"] = d_pre.T @ xc
    grads["enc_bias"] = d_pre.sum(axis=0)
    return total, grads, mse_term


def loss(model: SaeModel, batch: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise UsageError("loss requires a non-empty batch")
    _check_input(model, batch)
    total, grads, _ = loss_and_grads(model.params(), batch, model.config.activation)
    return total, grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def trainable_params(activation) -> Tuple[str, ...]:
    """Parameters Adam updates; a TopK encoder keeps its bias at zero"""
    if isinstance(activation, TopKActivation):
        return tuple(k for k in TRAINABLE if k != "enc_bias")
    return TRAINABLE


class Adam:
    """Adam with bias correction; moments kept per parameter name"""

    def __init__(
        self,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
        names: Tuple[str, ...] = TRAINABLE,
    ):
        self.lr = lr
        self.names = names
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        step_size = self.lr / bc1

        for k in self.names:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] *= self.beta1
            self.m[k] += (1.0 - self.beta1) * g
            self.v[k] *= self.beta2
            self.v[k] += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(self.v[k] / bc2) + self.epsilon
            params[k] -= step_size * self.m[k] / denom


def normalize_decoder(params: Dict[str, np.ndarray]) -> None:
    norms = np.linalg.norm(params["dec_weight"], axis=0, keepdims=True)
    params["dec_weight"] /= np.maximum(norms, 1e-12)


def init_params(config: SaeConfig, input_mean: np.ndarray, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    m, l = config.input_dim, config.latent_dim
    dec = rng.standard_normal((m, l))
    params = {
        "dec_weight": dec,
        "dec_bias": np.zeros(m),
        "enc_bias": np.zeros(l),
        "input_mean": np.asarray(input_mean, dtype=np.float64),
    }
    normalize_decoder(params)
    params["enc_weight"] = params["dec_weight"].T.copy()
    return params


def model_from_params(params: Dict[str, np.ndarray], config: SaeConfig) -> SaeModel:
    return SaeModel(config=config, **{name: params[name] for name in PARAM_ORDER})


def init_model(config: SaeConfig, input_mean: Optional[np.ndarray] = None) -> SaeModel:
    """Untrained model, drawn exactly as ``train`` draws its starting point"""
    rng = np.random.default_rng(config.seed)
    mean = np.zeros(config.input_dim) if input_mean is None else input_mean
    return model_from_params(init_params(config, mean, rng), config)


def _firing(model: SaeModel, x: np.ndarray) -> Tuple[np.ndarray, float]:
    """Per-latent firing counts and mean L0 over ``x``"""
    counts = np.zeros(model.config.latent_dim, dtype=np.int64)
    total_active = 0
    for start in range(0, x.shape[0], ENCODE_CHUNK):
        active = encode_batch(model, x[start:start + ENCODE_CHUNK]) != 0
        counts += active.sum(axis=0)
        total_active += int(active.sum())
    return counts, total_active / max(x.shape[0], 1)


def train(
    config: SaeConfig,
    train_corpus: EmbeddingCorpus,
    val_corpus: EmbeddingCorpus,
    progress: bool = False,
) -> Tuple[SaeModel, TrainStats]:
    """Adam over shuffled mini-batches; decoder columns re-normalized after every step"""
    for name, corpus in (("train", train_corpus), ("val", val_corpus)):
        if corpus.dim != config.input_dim:
            raise ShapeError(f"{name} corpus has dim {corpus.dim}, config expects {config.input_dim}")
        if corpus.count == 0:
            raise UsageError(f"{name} corpus is empty")

    rng = np.random.default_rng(config.seed)
    x_train = train_corpus.data.astype(np.float64)
    x_val = val_corpus.data.astype(np.float64)

    if config.center_inputs:
        # round through float32 so the trained model and the saved model agree
        input_mean = x_train.mean(axis=0).astype(np.float32).astype(np.float64)
    else:
        input_mean = np.zeros(config.input_dim)

    params = init_params(config, input_mean, rng)
    optimizer = Adam(lr=config.learning_rate, names=trainable_params(config.activation))
    stats = TrainStats(initial_val_mse=mse(model_from_params(params, config), x_val))
    logger.info(
        "Training SAE M=%d L=%d activation=%s epochs=%d seed=%d initial_val_mse=%.6f",
        config.input_dim, config.latent_dim, config.activation.kind, config.epochs,
        config.seed, stats.initial_val_mse,
    )

    n = x_train.shape[0]
    for epoch in tqdm(range(config.epochs), desc="epochs", disable=not progress, leave=False):
        order = rng.permutation(n)
        weighted = 0.0
        for start in range(0, n, config.batch_size):
            batch = x_train[order[start:start + config.batch_size]]
            total, grads, mse_term = loss_and_grads(params, batch, config.activation)
            if not np.isfinite(total) or not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingError(f"Loss diverged in epoch {epoch}", epoch=epoch)
            optimizer.step(params, grads)
            normalize_decoder(params)
            weighted += mse_term * batch.shape[0]

        snapshot = model_from_params(params, config)
        counts, mean_l0 = _firing(snapshot, x_train)
        stats.train_mse.append(weighted / n)
        stats.val_mse.append(mse(snapshot, x_val))
        stats.dead_latents.append(int(np.sum(counts == 0)))
        stats.mean_l0.append(mean_l0)
        stats.epochs_completed = epoch + 1
        logger.debug(
            "epoch=%d train_mse=%.6f val_mse=%.6f dead=%d l0=%.2f",
            epoch, stats.train_mse[-1], stats.val_mse[-1], stats.dead_latents[-1], mean_l0,
        )

    model = model_from_params(params, config)
    counts, _ = _firing(model, x_train)
    stats.final_val_mse = mse(model, x_val)
    stats.final_dead_latents = int(np.sum(counts == 0))
    stats.firing_frequency = (counts / n).tolist()
    logger.info(
        "✓ Trained SAE L=%d val_mse=%.6f (initial %.6f) dead_latents=%d",
        config.latent_dim, stats.final_val_mse, stats.initial_val_mse, stats.final_dead_latents,
    )
    return model, stats


def dead_latents(model: SaeModel, corpus: EmbeddingCorpus, threshold: float = 0.0) -> Set[int]:
    """Latent indices whose activation magnitude never exceeds ``threshold`` on the corpus"""
    if corpus.dim != model.config.input_dim:
        raise ShapeError(f"Corpus has dim {corpus.dim}, model expects {model.config.input_dim}")
    peak = np.zeros(model.config.latent_dim)
    for start in range(0, corpus.count, ENCODE_CHUNK):
        v = encode_batch(model, corpus.data[start:start + ENCODE_CHUNK])
        peak = np.maximum(peak, np.abs(v).max(axis=0))
    return {int(j) for j in np.flatnonzero(~(peak > threshold))}


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

def _shapes(config: SaeConfig) -> Dict[str, List[int]]:
    m, l = config.input_dim, config.latent_dim
    return {
        "enc_weight": [l, m],
        "enc_bias": [l],
        "dec_weight": [m, l],
        "dec_bias": [m],
        "input_mean": [m],
    }


def model_to_bytes(model: SaeModel) -> bytes:
    header = {
        "config": model.config.model_dump(mode="json"),
        "shapes": _shapes(model.config),
        "seed": model.config.seed,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)),
        header_bytes,
    ]
    for name in PARAM_ORDER:
        parts.append(getattr(model, name).astype("<f4", copy=False).tobytes(order="C"))
    return b"".join(parts)


def model_from_bytes(buf: bytes) -> SaeModel:
    if len(buf) < 12:
        raise FormatError("Checkpoint truncated inside the header")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"Bad checkpoint magic {buf[:4]!r}")
    version, header_len = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"Unsupported checkpoint version {version}")
    if 12 + header_len > len(buf):
        raise FormatError("Checkpoint truncated inside the JSON header")
    try:
        header = json.loads(buf[12:12 + header_len].decode("utf-8"))
        config = SaeConfig(**header["config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, PydanticValidationError) as e:
        raise FormatError(f"Checkpoint header is invalid: {e}") from e
    if header.get("shapes") != _shapes(config):
        raise FormatError("Checkpoint shapes disagree with its config")

    offset = 12 + header_len
    arrays = {}
    for name, shape in _shapes(config).items():
        count = int(np.prod(shape))
        if offset + 4 * count > len(buf):
            raise FormatError(f"Checkpoint truncated inside {name}")
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after checkpoint parameters")
    try:
        return SaeModel(config=config, **arrays)
    except (ShapeError, ValidationError) as e:
        raise FormatError(f"Checkpoint parameters are invalid: {e.message}") from e


def save_model(model: SaeModel, path: Union[str, Path]) -> Path:
    path = atomic_write_bytes(path, model_to_bytes(model))
    logger.info("✓ Saved checkpoint L=%d path=%s", model.config.latent_dim, path)
    return path


def load_model(path: Union[str, Path]) -> SaeModel:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"Checkpoint not found: {path}", path=str(path))
    with open(path, "rb") as f:
        buf = f.read()
    try:
        return model_from_bytes(buf)
    except FormatError as e:
        e.path = str(path)
        raise
