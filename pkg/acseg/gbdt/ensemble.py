"""
Multiclass gradient boosting with softmax cross-entropy and per-class trees
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np

from acseg.core.errors import (
    DimensionMismatch,
    InvariantViolation,
    ShapeMismatch,
    TooFewItems,
)
from acseg.core.types import FeatureMatrix, Points, ProbMap
from acseg.gbdt.binning import bin_features
from acseg.gbdt.tree import DecisionTree, TreeGrower
from acseg.models import GBDTConfig

logger = logging.getLogger(__name__)

MAX_LINE_SEARCH = 8
HESSIAN_FLOOR = 1e-16


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    expo = np.exp(shifted)
    return expo / expo.sum(axis=1, keepdims=True)


def cross_entropy(scores: np.ndarray, onehot: np.ndarray, weights: np.ndarray) -> float:
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_p = (shifted * onehot).sum(axis=1) - log_norm
    return float(-(weights * log_p).sum() / weights.sum())


@dataclass(frozen=True)
class TreeEnsemble:
    """Boosted trees of one stage; trees already include shrinkage"""

    trees: List[DecisionTree]
    C: int
    D: int
    shrinkage: float
    rounds_used: int
    empty_classes: List[int] = field(default_factory=list)
    loss_history: List[float] = field(default_factory=list, compare=False)

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        scores = np.zeros((X.shape[0], self.C))
        for tree in self.trees:
            scores += tree.predict(X)
        return scores

    def split_counts(self) -> np.ndarray:
        """Number of splits per feature over all trees"""
        counts = np.zeros(self.D, dtype=np.int64)
        for tree in self.trees:
            np.add.at(counts, tree.split_features(), 1)
        return counts


def _class_weights(labels: np.ndarray, C: int, balanced: bool) -> np.ndarray:
    if not balanced:
        return np.ones(labels.shape[0])
    counts = np.bincount(labels, minlength=C).astype(np.float64)
    present = np.count_nonzero(counts)
    per_class = np.where(counts > 0, labels.shape[0] / (present * np.maximum(counts, 1)), 0.0)
    return per_class[labels]


def train_ensemble(
    features: Union[FeatureMatrix, np.ndarray],
    labels: np.ndarray,
    C: int,
    weights: Optional[np.ndarray] = None,
    cfg: Optional[GBDTConfig] = None,
) -> TreeEnsemble:
    """
    Fit a softmax boosted ensemble

    Args:
        features: training features (n, D)
        labels: class per row; negative labels are ignored
        C: number of classes
        weights: optional per-row weights
        cfg: boosting hyperparameters

    Returns:
        Trained TreeEnsemble
    """
    cfg = cfg or GBDTConfig()
    X = features.values if isinstance(features, FeatureMatrix) else np.asarray(features, float)
    labels = np.asarray(labels, dtype=np.int64)
    if X.shape[0] != labels.shape[0]:
        raise ShapeMismatch(f"{X.shape[0]} feature rows but {labels.shape[0]} labels")
    keep = labels >= 0
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        keep &= weights > 0
    X, y = X[keep], labels[keep]
    row_weights = weights[keep] if weights is not None else np.ones(y.size)
    # canonical row order: the fit depends on the training multiset only
    order = np.lexsort(np.vstack([X.T, y, row_weights]))
    X, y, row_weights = X[order], y[order], row_weights[order]
    if y.size and y.max() >= C:
        raise ShapeMismatch(f"Label {y.max()} outside 0..{C - 1}")
    if y.size < C:
        raise TooFewItems(f"Need at least {C} labeled elements, got {y.size}")
    n, D = X.shape

    w = _class_weights(y, C, cfg.class_balanced) * row_weights
    counts = np.bincount(y, weights=w, minlength=C)
    empty = [c for c in range(C) if counts[c] <= 0]
    for c in empty:
        logger.warning(f"Class {c} has no training mass; it keeps its prior score")
    active = [c for c in range(C) if c not in empty]

    bins, thresholds = bin_features(X, cfg.max_bins)
    grower = TreeGrower(bins, thresholds, cfg.max_depth, cfg.l2, cfg.min_child_weight)
    onehot = np.zeros((n, C))
    onehot[np.arange(n), y] = 1.0
    rng = np.random.default_rng(cfg.seed)

    scores = np.zeros((n, C))
    loss = cross_entropy(scores, onehot, w)
    history = [loss]
    trees: List[DecisionTree] = []
    stalled = 0
    rounds = 0
    all_rows = np.arange(n)

    for _ in range(cfg.rounds):
        probs = softmax(scores)
        grad = (probs - onehot) * w[:, None]
        hess = np.maximum(2.0 * probs * (1.0 - probs) * w[:, None], HESSIAN_FLOOR)
        rows = all_rows
        if cfg.subsample < 1.0:
            rows = all_rows[rng.random(n) < cfg.subsample]
            if rows.size == 0:
                rows = all_rows

        round_trees = [
            grower.grow(grad[:, c], hess[:, c], rows, c, C, cfg.shrinkage) for c in active
        ]
        update = sum((tree.predict(X) for tree in round_trees), np.zeros((n, C)))

        factor = 1.0
        new_loss = cross_entropy(scores + update, onehot, w)
        for _ in range(MAX_LINE_SEARCH):
            if new_loss <= loss:
                break
            factor *= 0.5
            new_loss = cross_entropy(scores + factor * update, onehot, w)
        if new_loss > loss:
            logger.warning(f"Round {rounds + 1} could not reduce the loss; stopping")
            break
        if factor != 1.0:
            round_trees = [tree.scaled(factor) for tree in round_trees]

        scores = scores + factor * update
        trees.extend(round_trees)
        rounds += 1
        improvement = loss - new_loss
        loss = new_loss
        history.append(loss)
        stalled = stalled + 1 if improvement < cfg.early_stop_tol else 0
        if stalled >= cfg.early_stop_rounds:
            logger.debug(f"Early stop after {rounds} rounds")
            break

    if any(b > a for a, b in zip(history, history[1:])):
        raise InvariantViolation("Boosting loss increased between rounds")
    logger.debug(f"Trained {len(trees)} trees over {rounds} rounds, loss {loss:.6f}")
    return TreeEnsemble(trees, C, D, cfg.shrinkage, rounds, empty, history)


def predict_proba(model: TreeEnsemble, features: Union[FeatureMatrix, np.ndarray]) -> ProbMap:
    """Softmax of accumulated scores as a ProbMap over the features' geometry"""
    if isinstance(features, FeatureMatrix):
        X, geometry = features.values, features.geometry
    else:
        X = np.asarray(features, dtype=np.float64)
        geometry = Points(X.shape[0])
    if X.shape[1] != model.D:
        raise DimensionMismatch(f"Model expects {model.D} features, got {X.shape[1]}")
    return ProbMap(softmax(model.decision_function(X)), geometry)
