"""Final feature construction and the linear classifier on top of it:
l2 normalization, max-voting concatenation of the base feature with the K
subset features, and a one-vs-all linear SVM trained by a deterministic
subgradient solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit
from .errors import ContractError, ShapeError
from .numkit import Rng
from .subset import SelectorDecision

_ZERO_NORM = 1e-12


@dataclass(frozen=True)
class FusedFeature:
    vector: np.ndarray
    chosen_subset: int


@dataclass(frozen=True)
class SvmModel:
    """One-vs-all linear classifier: one hinge-loss separator per class.

    checkpoint_objectives[i, c] is the regularized objective of class c's
    solver output at checkpoint_epochs[i]; it is non-increasing down each
    column by construction.
    """

    weights: np.ndarray  # (C, D)
    biases: np.ndarray  # (C,)
    lam: float
    checkpoint_epochs: tuple[int, ...]
    checkpoint_objectives: np.ndarray  # (len(checkpoint_epochs), C)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """v / ||v||, except vectors with norm <= 1e-12 pass through unchanged
    (a dead relu column legitimately produces zeros; the pipeline must not abort)."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError("l2_normalize expects a 1-d vector")
    norm = float(np.sqrt((v * v).sum()))
    if norm > _ZERO_NORM:
        return v / norm
    return v.copy()


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.sqrt((m * m).sum(axis=-1, keepdims=True))
    safe = np.where(norms > _ZERO_NORM, norms, 1.0)
    return m / safe


def _check_decision(decision: SelectorDecision, k: int) -> None:
    w = np.asarray(decision.weights, dtype=np.float64)
    if w.shape != (k,):
        raise ShapeError(f"decision weights must have shape ({k},), got {w.shape}")
    if not np.all((w == 0.0) | (w == 1.0)) or w.sum() != 1.0:
        raise ContractError("decision weights must be one-hot")
    if not 0 <= decision.chosen < k or w[decision.chosen] != 1.0:
        raise ContractError("decision.chosen must point at the single 1 entry")


def fuse(base_feat: np.ndarray, subset_feats, decision: SelectorDecision) -> FusedFeature:
    """Concatenate the l2-normalized base feature with the K max-voted,
    l2-normalized subset features in fixed subset order.

    The selector's one-hot weights zero all but the chosen subset block, so
    the output width is always D_base + K * D_subset with at most one nonzero
    subset block.
    """
    base = l2_normalize(base_feat)
    feats = np.asarray(subset_feats, dtype=np.float64)
    if feats.ndim != 2:
        raise ShapeError("subset features must be K vectors of equal width")
    k = feats.shape[0]
    _check_decision(decision, k)
    blocks = [base]
    for i in range(k):
        blocks.append(decision.weights[i] * l2_normalize(feats[i]))
    return FusedFeature(vector=np.concatenate(blocks), chosen_subset=decision.chosen)


def fuse_batch(base_feats: np.ndarray, subset_feats: np.ndarray, chosen: np.ndarray) -> np.ndarray:
    """Vectorized fuse over a batch: (B, D_base + K * D_subset)."""
    base_feats = numkit.as_matrix(base_feats, "base_feats")
    subset_feats = np.asarray(subset_feats, dtype=np.float64)
    if subset_feats.ndim != 3 or subset_feats.shape[0] != base_feats.shape[0]:
        raise ShapeError("subset features must be (B, K, D) aligned with base features")
    b, k, d = subset_feats.shape
    chosen = np.asarray(chosen, dtype=np.int64)
    if chosen.shape != (b,) or (chosen.size and (chosen.min() < 0 or chosen.max() >= k)):
        raise ContractError("chosen indices must be (B,) values in [0, K)")
    mask = np.zeros((b, k))
    mask[np.arange(b), chosen] = 1.0
    subset_block = l2_normalize_rows(subset_feats) * mask[:, :, None]
    return np.concatenate([l2_normalize_rows(base_feats), subset_block.reshape(b, k * d)], axis=1)


def svm_objective(w: np.ndarray, b: float, features: np.ndarray, y: np.ndarray, lam: float) -> float:
    """Regularized mean hinge for one binary problem with labels in {-1, +1}.
    The bias is unregularized."""
    margins = y * (features @ w + b)
    return float(np.maximum(0.0, 1.0 - margins).mean() + 0.5 * lam * (w @ w))


def svm_train(
    features: np.ndarray,
    labels,
    lam: float = 1e-4,
    epochs: int = 200,
    rng: Rng | None = None,
    fit_bias: bool = True,
) -> SvmModel:
    """Train C one-vs-all hinge classifiers (+1 for the class, -1 otherwise).

    Solver: deterministic full-batch subgradient descent with the bounded
    1 / (1 + lam * t) step schedule (same 1 / (lam * t) asymptotics, sane
    early steps), projection onto the ball of radius 1/sqrt(lam), and prefix
    iterate averaging.  Per class, the returned model is the best-objective
    prefix average seen so far (the zero model counts as the t=0 candidate),
    which makes the per-class objective non-increasing over checkpoints and
    never worse than the zero model.  ``rng`` is accepted for interface
    symmetry; the solver draws nothing.
    """
    features = numkit.as_matrix(features, "features")
    labels = np.asarray(labels).astype(np.int64)
    if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
        raise ShapeError("labels must be 1-d and match the feature rows")
    classes = np.unique(labels)
    c = classes.size
    if c < 2:
        raise ContractError("svm_train needs at least two classes")
    if not np.array_equal(classes, np.arange(c)):
        raise ContractError("labels must be dense class indices 0..C-1")
    n, d = features.shape
    if n < c:
        raise ContractError("need at least as many rows as classes")
    if lam <= 0:
        raise ContractError("lam must be positive")
    if epochs < 1:
        raise ContractError("epochs must be >= 1")

    y = np.where(labels[:, None] == np.arange(c)[None, :], 1.0, -1.0)  # (N, C)
    w = np.zeros((c, d))
    bias = np.zeros(c)
    w_sum = np.zeros((c, d))
    b_sum = np.zeros(c)
    radius = 1.0 / np.sqrt(lam)

    best_w = np.zeros((c, d))
    best_b = np.zeros(c)
    best_obj = np.full(c, 1.0)  # objective of the zero model: mean hinge is exactly 1

    checkpoints = tuple(sorted({1, max(1, epochs // 2), epochs}))
    recorded = np.zeros((len(checkpoints), c))
    for t in range(1, epochs + 1):
        eta = 1.0 / (1.0 + lam * t)
        margins = y * (features @ w.T + bias)  # (N, C)
        viol = (margins < 1.0).astype(np.float64)
        grad_w = lam * w - ((y * viol).T @ features) / n
        w = w - eta * grad_w
        norms = np.sqrt((w * w).sum(axis=1))
        over = norms > radius
        if np.any(over):
            w[over] *= (radius / norms[over])[:, None]
        if fit_bias:
            bias = bias + eta * (y * viol).sum(axis=0) / n
        w_sum += w
        b_sum += bias
        avg_w = w_sum / t
        avg_b = b_sum / t
        avg_margins = y * (features @ avg_w.T + avg_b)
        hinge = np.maximum(0.0, 1.0 - avg_margins).mean(axis=0)
        obj = hinge + 0.5 * lam * (avg_w * avg_w).sum(axis=1)
        better = obj < best_obj
        if np.any(better):
            best_obj = np.where(better, obj, best_obj)
            best_w[better] = avg_w[better]
            best_b[better] = avg_b[better]
        if t in checkpoints:
            recorded[checkpoints.index(t)] = best_obj
    return SvmModel(
        weights=best_w,
        biases=best_b,
        lam=float(lam),
        checkpoint_epochs=checkpoints,
        checkpoint_objectives=recorded,
    )


def svm_predict_batch(model: SvmModel, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(predicted classes, score matrix) for a batch of feature rows."""
    features = numkit.as_matrix(features, "features")
    if features.shape[1] != model.weights.shape[1]:
        raise ShapeError(
            f"feature width {features.shape[1]} does not match model width {model.weights.shape[1]}"
        )
    scores = features @ model.weights.T + model.biases
    return np.argmax(scores, axis=1), scores


def svm_predict(model: SvmModel, feature: np.ndarray) -> tuple[int, np.ndarray]:
    """Scores W x + b and the argmax class (ties to the lowest index)."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.ndim != 1:
        raise ShapeError("svm_predict expects a single feature vector")
    classes, scores = svm_predict_batch(model, feature[None])
    return int(classes[0]), scores[0]
