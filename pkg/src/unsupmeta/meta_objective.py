"""Few-shot ridge-regression objective used to score representations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .base_model import BaseParams, embed
from .tensor import Tensor

PRED_EPS = 1e-8


@dataclass(frozen=True)
class MetaObjectiveConfig:
    ridge_penalty: float = 0.1
    eval_repeats: int = 5

    def __post_init__(self):
        if not self.ridge_penalty > 0:
            raise ValueError("ridge_penalty must be positive")
        if self.eval_repeats < 1:
            raise ValueError("eval_repeats must be at least 1")


@dataclass
class RidgeSolution:
    C: Tensor  # [features + 1, targets]; last row is the bias

    def predict(self, features) -> Tensor:
        return T.matmul(_with_bias(T.as_tensor(features)), self.C)


def _xy(batch):
    if hasattr(batch, "x"):
        return batch.x, batch.targets
    x, y = batch
    return x, y


def _with_bias(x: Tensor) -> Tensor:
    return T.concat([x, Tensor(np.ones((x.shape[0], 1)))], axis=1)


def center_normalize_targets(y) -> np.ndarray:
    """Subtract the global mean, then scale each row to unit RMS.

    Rows that are exactly zero after centering stay zero.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < 1 or y.shape[1] < 1:
        raise T.ShapeError(f"targets must be a non-empty [K, C] matrix, got {y.shape}")
    centered = y - y.mean()
    rms = np.sqrt(np.mean(centered * centered, axis=1, keepdims=True))
    safe = np.where(rms > 0, rms, 1.0)
    return np.where(rms > 0, centered / safe, 0.0)


def ridge_solve(features, targets, ridge_penalty: float) -> RidgeSolution:
    """Closed-form ridge fit with an appended ones column."""
    if not ridge_penalty > 0:
        raise ValueError("ridge_penalty must be positive")
    A = _with_bias(T.as_tensor(features))
    gram = T.matmul(A.T, A) + Tensor(ridge_penalty * np.eye(A.shape[1]))
    rhs = T.matmul(A.T, T.as_tensor(targets))
    return RidgeSolution(T.solve_spd(gram, rhs))


def objective_from_features(feat_a, y_a, feat_b, y_b, ridge_penalty: float) -> Tensor:
    solution = ridge_solve(feat_a, center_normalize_targets(y_a), ridge_penalty)
    p = solution.predict(feat_b)
    p_hat = p / T.sqrt(T.sum(T.square(p), 1, keepdims=True) + PRED_EPS)
    diff = p_hat - Tensor(center_normalize_targets(y_b))
    return T.mean(T.sum(T.square(diff), 1))


def meta_objective(batch_a, batch_b, params: BaseParams, cfg: MetaObjectiveConfig | None = None) -> Tensor:
    """Fit ridge weights on ``batch_a`` embeddings and score ``batch_b`` by squared
    distance between row-normalized predictions and normalized targets."""
    cfg = cfg or MetaObjectiveConfig()
    xa, ya = _xy(batch_a)
    xb, yb = _xy(batch_b)
    if np.shape(ya)[1] != np.shape(yb)[1]:
        raise T.ShapeError("both batches need the same target width")
    return objective_from_features(embed(xa, params), ya, embed(xb, params), yb, cfg.ridge_penalty)


def probe_predict(feat_a, y_a, feat_b, n_classes: int, ridge_penalty: float) -> np.ndarray:
    solution = ridge_solve(Tensor(feat_a), center_normalize_targets(y_a), ridge_penalty)
    p = solution.predict(Tensor(feat_b)).data
    return np.argmax(p[:, :n_classes], axis=1)


def probe_accuracy(batch_a, batch_b, params: BaseParams, cfg: MetaObjectiveConfig | None = None,
                   n_classes: int | None = None) -> float:
    """Ridge-probe classification accuracy of ``batch_b`` after fitting ``batch_a``."""
    cfg = cfg or MetaObjectiveConfig()
    xa, ya = _xy(batch_a)
    xb, yb = _xy(batch_b)
    if n_classes is None:
        n_classes = getattr(batch_b, "n_classes", np.shape(yb)[1])
    feat_a = embed(xa, params).data
    feat_b = embed(xb, params).data
    pred = probe_predict(feat_a, ya, feat_b, n_classes, cfg.ridge_penalty)
    truth = np.argmax(np.asarray(yb)[:, :n_classes], axis=1)
    return float(np.mean(pred == truth))
