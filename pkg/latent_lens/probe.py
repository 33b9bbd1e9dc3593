"""
FeatureProbe - finds the latent index most associated with a labeled attribute
and evaluates that single index as a discriminant.

A logistic regression is fitted on the frozen SAE's latents; the latent with
the largest positive coefficient is the feature index ``phi``. At evaluation a
sample is predicted positive iff its activation at ``phi`` is > 0.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from latent_lens.embedding_store import CorpusSplit, EmbeddingCorpus, LabelSet
from latent_lens.exceptions import ConvergenceError, ShapeError, UsageError
from latent_lens.sae_core import SaeModel, encode_batch, load_model

logger = logging.getLogger(__name__)

POWER_ITERATIONS = 50
LIPSCHITZ_MARGIN = 1.1


class ProbeConfig(BaseModel):
    l2_lambda: float = Field(default=1e-3, ge=0.0, description="L2 penalty on the latent weights")
    max_iters: int = Field(default=20000, gt=0)
    tolerance: float = Field(default=1e-6, gt=0.0, description="Gradient-norm stopping threshold")
    seed: int = Field(default=0, ge=0, lt=2**64)
    init_scale: float = Field(default=0.0, ge=0.0, description="Std of the random initial weights")


class LogisticFit(BaseModel):
    weights: List[float]
    intercept: float
    loss: float
    iterations: int
    grad_norm: float


class StratumRecall(BaseModel):
    positives: int
    detected: int
    recall: float


class IndexEvaluation(BaseModel):
    phi: int
    precision: float
    recall: float
    true_positives: int
    false_positives: int
    true_negatives: int
    false_negatives: int
    zero_predictions: bool = Field(description="No sample predicted positive; precision reported as 0")
    false_positive_ids: List[str] = Field(default_factory=list)
    false_negative_ids: List[str] = Field(default_factory=list)
    misclassified_activation: Dict[str, float] = Field(default_factory=dict)
    per_stratum: Dict[str, StratumRecall] = Field(default_factory=dict)


class ProbeTrainMetrics(BaseModel):
    accuracy: float
    loss: float
    iterations: int
    grad_norm: float
    index: IndexEvaluation


class ProbeResult(BaseModel):
    positive_label: str
    latent_dim: int
    weights: List[float]
    intercept: float
    phi: int
    train: ProbeTrainMetrics
    test: IndexEvaluation
    strata: Dict[str, str] = Field(default_factory=dict, description="sample_id -> stratum of misclassified ids")


# ---------------------------------------------------------------------------
# Logistic regression
# ---------------------------------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_objective(theta: np.ndarray, x: np.ndarray, y: np.ndarray, l2_lambda: float):
    """Mean log-loss + (lambda/2)||w||^2 and its gradient; ``theta`` = (w, b), b unpenalized"""
    w, b = theta[:-1], theta[-1]
    z = x @ w + b
    # log(1 + e^z) - y z, computed stably
    value = float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2_lambda * np.dot(w, w))
    r = (_sigmoid(z) - y) / x.shape[0]
    grad = np.empty_like(theta)
    grad[:-1] = x.T @ r + l2_lambda * w
    grad[-1] = r.sum()
    return value, grad


def _lipschitz(x: np.ndarray, l2_lambda: float) -> float:
    n = x.shape[0]
    aug = np.hstack([x, np.ones((n, 1))])
    u = np.ones(aug.shape[1]) / np.sqrt(aug.shape[1])
    top = 0.0
    for _ in range(POWER_ITERATIONS):
        w = aug.T @ (aug @ u)
        top = float(np.linalg.norm(w))
        if top == 0:
            break
        u = w / top
    return LIPSCHITZ_MARGIN * (0.25 * top / n + l2_lambda) + 1e-12


def fit_logistic(x: np.ndarray, y: np.ndarray, config: ProbeConfig) -> LogisticFit:
    """Full-batch accelerated gradient descent with gradient-based momentum restart"""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dim = x.shape[1]
    theta = np.zeros(dim + 1)
    if config.init_scale > 0:
        theta = np.random.default_rng(config.seed).normal(0.0, config.init_scale, dim + 1)
    step = 1.0 / _lipschitz(x, config.l2_lambda)

    prev = theta.copy()
    t = 1.0
    grad_norm = np.inf
    for it in range(config.max_iters):
        value, grad = logistic_objective(theta, x, y, config.l2_lambda)
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= config.tolerance:
            return LogisticFit(
                weights=theta[:-1].tolist(), intercept=float(theta[-1]),
                loss=value, iterations=it, grad_norm=grad_norm,
            )
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        lookahead = theta + ((t - 1.0) / t_next) * (theta - prev)
        _, g_look = logistic_objective(lookahead, x, y, config.l2_lambda)
        candidate = lookahead - step * g_look
        if np.dot(g_look, candidate - theta) > 0:
            t_next = 1.0
            candidate = theta - step * grad
        prev, theta, t = theta, candidate, t_next

    raise ConvergenceError(
        f"Probe did not converge in {config.max_iters} iterations (grad norm {grad_norm:.3e})",
        grad_norm=grad_norm,
    )


# ---------------------------------------------------------------------------
# Single-index discriminant
# ---------------------------------------------------------------------------

def evaluate_activations(
    phi: int,
    activation: np.ndarray,
    y: np.ndarray,
    sample_ids: Sequence[str],
    strata: Optional[Sequence[Optional[str]]] = None,
) -> IndexEvaluation:
    """Score ``activation > 0`` against binary labels"""
    activation = np.asarray(activation, dtype=np.float64)
    y = np.asarray(y).astype(bool)
    pred = activation > 0

    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    tn = int(np.sum(~pred & ~y))
    fn = int(np.sum(~pred & y))
    zero_predictions = tp + fp == 0
    precision = 0.0 if zero_predictions else tp / (tp + fp)
    recall = tp / (tp + fn) if tp + fn else 0.0

    fp_idx = np.flatnonzero(pred & ~y)
    fn_idx = np.flatnonzero(~pred & y)
    per_stratum: Dict[str, StratumRecall] = {}
    if strata is not None:
        for name in sorted({s for s, label in zip(strata, y) if s is not None and label}):
            members = np.array([s == name for s in strata]) & y
            detected = int(np.sum(pred & members))
            total = int(members.sum())
            per_stratum[name] = StratumRecall(positives=total, detected=detected, recall=detected / total)

    return IndexEvaluation(
        phi=int(phi),
        precision=precision,
        recall=recall,
        true_positives=tp,
        false_positives=fp,
        true_negatives=tn,
        false_negatives=fn,
        zero_predictions=zero_predictions,
        false_positive_ids=[sample_ids[i] for i in fp_idx],
        false_negative_ids=[sample_ids[i] for i in fn_idx],
        misclassified_activation={
            sample_ids[i]: float(activation[i]) for i in np.concatenate([fp_idx, fn_idx])
        },
        per_stratum=per_stratum,
    )


def _labeled_rows(labels: LabelSet, corpus: EmbeddingCorpus, index_set: Sequence[int]):
    y_all = labels.label_vector(corpus)
    idx = np.asarray(index_set, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= corpus.count):
        raise UsageError(f"Index set reaches outside the corpus of {corpus.count} rows")
    idx = idx[y_all[idx] >= 0]
    return idx, y_all[idx].astype(bool)


def evaluate_index(
    model: SaeModel,
    phi: int,
    corpus: EmbeddingCorpus,
    labels: LabelSet,
    index_set: Sequence[int],
) -> IndexEvaluation:
    """Precision/recall of 'activation at phi > 0' over the labeled rows of ``index_set``"""
    if len(index_set) == 0:
        raise UsageError("evaluate_index needs a non-empty index set")
    if not 0 <= phi < model.config.latent_dim:
        raise ShapeError(f"phi={phi} outside latent_dim={model.config.latent_dim}")
    idx, y = _labeled_rows(labels, corpus, index_set)
    if idx.size == 0:
        raise UsageError("None of the requested rows carries a label")
    activation = encode_batch(model, corpus.data[idx])[:, phi]
    strata = labels.stratum_vector(corpus)
    return evaluate_activations(
        phi,
        activation,
        y,
        [corpus.sample_ids[i] for i in idx],
        [strata[i] for i in idx],
    )


# ---------------------------------------------------------------------------
# Probe fitting
# ---------------------------------------------------------------------------

def select_phi(weights: Sequence[float]) -> int:
    """Index of the largest positive-class coefficient, lowest index on ties"""
    return int(np.argmax(np.asarray(weights)))


def fit_probe(
    model: SaeModel,
    corpus: EmbeddingCorpus,
    labels: LabelSet,
    split: CorpusSplit,
    config: ProbeConfig,
) -> ProbeResult:
    split.check_bounds(corpus.count)
    train_idx, y_train = _labeled_rows(labels, corpus, split.train_indices)
    test_idx, y_test = _labeled_rows(labels, corpus, split.test_indices)
    for name, y in (("train", y_train), ("test", y_test)):
        if y.size == 0 or y.all() or not y.any():
            raise UsageError(f"'{labels.positive_label}' labels are constant on the {name} partition")

    z_train = encode_batch(model, corpus.data[train_idx])
    fit = fit_logistic(z_train, y_train, config)
    phi = select_phi(fit.weights)

    w = np.asarray(fit.weights)
    train_pred = (z_train @ w + fit.intercept) > 0
    strata = labels.stratum_vector(corpus)
    train_index = evaluate_activations(
        phi, z_train[:, phi], y_train,
        [corpus.sample_ids[i] for i in train_idx], [strata[i] for i in train_idx],
    )
    test_index = evaluate_index(model, phi, corpus, labels, test_idx)

    misclassified = test_index.false_positive_ids + test_index.false_negative_ids
    result = ProbeResult(
        positive_label=labels.positive_label,
        latent_dim=model.config.latent_dim,
        weights=fit.weights,
        intercept=fit.intercept,
        phi=phi,
        train=ProbeTrainMetrics(
            accuracy=float(np.mean(train_pred == y_train)),
            loss=fit.loss,
            iterations=fit.iterations,
            grad_norm=fit.grad_norm,
            index=train_index,
        ),
        test=test_index,
        strata={sid: labels.strata[sid] for sid in misclassified if labels.strata and sid in labels.strata},
    )
    logger.info(
        "✓ Probe '%s' L=%d phi=%d precision=%.3f recall=%.3f iterations=%d",
        labels.positive_label, model.config.latent_dim, phi,
        test_index.precision, test_index.recall, fit.iterations,
    )
    return result


def misclassified_table(result: ProbeResult) -> pd.DataFrame:
    rows = [
        {"sample_id": sid, "kind": kind, "stratum": result.strata.get(sid, ""),
         "activation": result.test.misclassified_activation.get(sid, 0.0)}
        for kind, ids in (("false_positive", result.test.false_positive_ids),
                          ("false_negative", result.test.false_negative_ids))
        for sid in ids
    ]
    return pd.DataFrame(rows, columns=["sample_id", "kind", "stratum", "activation"])


def probe_grid(
    grid,
    corpus: EmbeddingCorpus,
    labels: LabelSet,
    split: CorpusSplit,
    config: ProbeConfig,
) -> pd.DataFrame:
    """Fit a probe per completed grid cell; failures are recorded, the sweep continues"""
    rows = []
    for cell in sorted(grid.completed(), key=lambda c: (c.latent_dim, c.k)):
        row = {"latent_dim": cell.latent_dim, "k": cell.k, "phi": np.nan,
               "precision": np.nan, "recall": np.nan, "status": "ok", "error": ""}
        try:
            result = fit_probe(load_model(Path(cell.checkpoint)), corpus, labels, split, config)
            row.update(phi=result.phi, precision=result.test.precision, recall=result.test.recall)
        except Exception as e:  # one bad cell must not abort the sweep
            logger.error("❌ Probe failed for cell %s: %s", cell.key, e)
            row.update(status="failed", error=f"{type(e).__name__}: {e}")
        rows.append(row)

    df = pd.DataFrame(rows, columns=["latent_dim", "k", "phi", "precision", "recall", "status", "error"])
    weak = df[(df["status"] == "ok") & (df["recall"] < 0.9)]
    for _, row in weak.iterrows():
        logger.info(
            "Cell %d_%d: '%s' index recall %.3f below 0.9",
            row["latent_dim"], row["k"], labels.positive_label, row["recall"],
        )
    return df
