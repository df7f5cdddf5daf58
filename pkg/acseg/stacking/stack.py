"""
Auto-context cascade trained with stacked generalization: every stage
holds M fold ensembles for leakage-free cross predictions and one
full-data ensemble for inference
"""

import concurrent.futures
import hashlib
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.model_selection import KFold

from acseg.autocontext import assemble_autocontext_2d, assemble_autocontext_3d
from acseg.core.errors import (
    ConfigError,
    DimensionMismatch,
    FingerprintMismatch,
    InvariantViolation,
    ShapeMismatch,
    TooFewItems,
)
from acseg.core.types import FeatureMatrix, ProbMap
from acseg.gbdt import TreeEnsemble, predict_proba, train_ensemble
from acseg.models import StackConfig, StageReport

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StackItem:
    """One training or test item: data features, flat labels (-1 ignored) and context inputs"""

    item_id: str
    features: FeatureMatrix
    labels: Optional[np.ndarray] = None
    image: Optional[np.ndarray] = None
    prior: Optional[ProbMap] = None


@dataclass(frozen=True)
class StageModel:
    fold_models: List[TreeEnsemble]
    full_model: TreeEnsemble
    fold_fingerprints: List[str] = field(default_factory=list)


@dataclass
class StackModel:
    """Ordered stages; stage 1 reads data features only unless a prior is required"""

    stages: List[StageModel]
    folds: int
    C: int
    mode: str
    data_dim: int
    feature_fingerprint: str = ""
    requires_prior: bool = False
    fold_train_ids: List[List[str]] = field(default_factory=list)
    reports: List[StageReport] = field(default_factory=list)


@dataclass
class StackTrainingResult:
    model: StackModel
    cross_predictions: List[List[ProbMap]]
    timings: Dict[str, float]


def split_folds(n_items: int, folds: int, seed: int = 0) -> np.ndarray:
    """Fold index per item: a seeded shuffled partition with sizes differing by at most one"""
    if folds < 1:
        raise ConfigError("Need at least one fold")
    if n_items < folds:
        raise TooFewItems(f"{n_items} items cannot fill {folds} folds")
    assignment = np.zeros(n_items, dtype=np.int64)
    if folds == 1:
        return assignment
    splitter = KFold(n_splits=folds, shuffle=True, random_state=seed)
    for fold, (_, held_out) in enumerate(splitter.split(np.arange(n_items))):
        assignment[held_out] = fold
    return assignment


def id_fingerprint(ids: Sequence[str]) -> str:
    return hashlib.md5("\n".join(sorted(ids)).encode()).hexdigest()


def stage_features(
    item: StackItem, previous: Optional[ProbMap], mode: str
) -> FeatureMatrix:
    """Data features, followed by auto-context of `previous` when given"""
    if previous is None:
        return item.features
    if mode == "2d":
        if item.image is None:
            raise ShapeMismatch(f"Item {item.item_id} needs its image for 2D context")
        context = assemble_autocontext_2d(item.image, previous)
    else:
        context = assemble_autocontext_3d(previous)
    return FeatureMatrix.concat([item.features, context])


def _training_rows(items: Sequence[StackItem], rate: float, seed: int) -> List[np.ndarray]:
    rows = []
    for position, item in enumerate(items):
        valid = np.flatnonzero(item.labels >= 0)
        if rate < 1.0 and valid.size:
            rng = np.random.default_rng([seed, position])
            chosen = valid[rng.random(valid.size) < rate]
            valid = chosen if chosen.size else valid[:1]
        rows.append(valid)
    return rows


def _overall_accuracy(items: Sequence[StackItem], predictions: Sequence[ProbMap]) -> float:
    correct = total = 0
    for item, p in zip(items, predictions):
        valid = item.labels >= 0
        correct += int((np.argmax(p.probs, axis=1)[valid] == item.labels[valid]).sum())
        total += int(valid.sum())
    return correct / total if total else 0.0


def train_stack(
    items: Sequence[StackItem],
    C: int,
    cfg: Optional[StackConfig] = None,
    mode: str = "2d",
    threads: int = 1,
    feature_fingerprint: str = "",
) -> StackTrainingResult:
    """
    Train the cascade

    Args:
        items: labeled training items sharing one data feature layout
        C: number of classes
        cfg: stage count, folds, seed and boosting settings
        mode: "2d" (grid context) or "3d" (point context)
        threads: workers for fold training
        feature_fingerprint: stored with the model for prediction-time checks

    Returns:
        StackTrainingResult with the model and every stage's cross predictions
    """
    cfg = cfg or StackConfig()
    if not items:
        raise TooFewItems("No training items")
    if any(item.labels is None for item in items):
        raise ShapeMismatch("Every training item needs labels")
    data_dim = items[0].features.D
    if any(item.features.D != data_dim for item in items):
        raise DimensionMismatch("Training items disagree on the feature dimension")
    requires_prior = items[0].prior is not None
    if any((item.prior is not None) != requires_prior for item in items):
        raise ShapeMismatch("Either every item or no item carries a prior")

    ids = [item.item_id for item in items]
    fold_of = split_folds(len(items), cfg.folds, cfg.seed)
    fold_train = [
        [i for i in range(len(items)) if cfg.folds == 1 or fold_of[i] != m]
        for m in range(cfg.folds)
    ]
    rows = _training_rows(items, cfg.pixel_subsample, cfg.seed)
    timings: Dict[str, float] = {"autocontext": 0.0}

    stages: List[StageModel] = []
    reports: List[StageReport] = []
    cross: List[List[ProbMap]] = []
    previous: List[Optional[ProbMap]] = [item.prior for item in items]

    for stage in range(1, cfg.stages + 1):
        started = time.perf_counter()
        features = [stage_features(item, prev, mode) for item, prev in zip(items, previous)]
        has_context = previous[0] is not None
        timings["autocontext"] += time.perf_counter() - started if has_context else 0.0

        started = time.perf_counter()
        X = [f.values[r] for f, r in zip(features, rows)]
        y = [item.labels[r] for item, r in zip(items, rows)]

        def fit(members: List[int]) -> Tuple[TreeEnsemble, str]:
            ensemble = train_ensemble(
                np.concatenate([X[i] for i in members]),
                np.concatenate([y[i] for i in members]),
                C,
                cfg=cfg.gbdt,
            )
            # fingerprint of the items whose rows the ensemble consumed
            return ensemble, id_fingerprint([ids[i] for i in members])

        jobs = list(fold_train)
        if cfg.folds > 1:
            jobs.append(list(range(len(items))))
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
            fitted = list(executor.map(fit, jobs))
        fold_models = [ensemble for ensemble, _ in fitted[: cfg.folds]]
        fingerprints = [consumed for _, consumed in fitted[: cfg.folds]]
        full_model = fitted[-1][0]

        predictions = [
            predict_proba(fold_models[fold_of[i]], features[i]) for i in range(len(items))
        ]
        stages.append(StageModel(fold_models, full_model, fingerprints))
        timings[f"stage{stage}"] = time.perf_counter() - started

        share = None
        if has_context:
            counts = full_model.split_counts()
            total = counts.sum()
            share = float(counts[data_dim:].sum() / total) if total else 0.0
        accuracy = _overall_accuracy(items, predictions)
        reports.append(
            StageReport(
                stage=stage,
                held_out_accuracy=accuracy,
                autocontext_share=share,
                rounds_used=full_model.rounds_used,
                empty_classes=full_model.empty_classes,
            )
        )
        logger.info(
            f"Stage {stage}: held-out accuracy {accuracy:.4f}, "
            f"{full_model.rounds_used} rounds, {timings[f'stage{stage}']:.2f}s"
        )
        cross.append(predictions)
        previous = predictions

    model = StackModel(
        stages=stages,
        folds=cfg.folds,
        C=C,
        mode=mode,
        data_dim=data_dim,
        feature_fingerprint=feature_fingerprint,
        requires_prior=requires_prior,
        fold_train_ids=[[ids[i] for i in members] for members in fold_train],
        reports=reports,
    )
    verify_no_leakage(model, ids, fold_of)
    return StackTrainingResult(model, cross, timings)


def verify_no_leakage(model: StackModel, ids: Sequence[str], fold_of: np.ndarray) -> None:
    """
    Check that no fold model was trained on an item it cross-predicts

    The training-set fingerprint each fold ensemble recorded when it was fitted
    must equal the fingerprint of exactly the items outside its fold.
    """
    if model.folds == 1:
        return
    fold_of = np.asarray(fold_of)
    for fold in range(model.folds):
        outside = [ids[i] for i in np.flatnonzero(fold_of != fold)]
        expected = id_fingerprint(outside)
        held_out = {ids[i] for i in np.flatnonzero(fold_of == fold)}
        leaked = held_out & set(model.fold_train_ids[fold])
        if leaked:
            raise InvariantViolation(f"Fold {fold} lists held-out items {sorted(leaked)}")
        for stage_index, stage in enumerate(model.stages, 1):
            if stage.fold_fingerprints[fold] != expected:
                raise InvariantViolation(
                    f"Stage {stage_index} fold {fold} was not trained on exactly the items "
                    f"outside its fold"
                )


def predict_stack(
    model: StackModel,
    item: StackItem,
    feature_fingerprint: Optional[str] = None,
    timings: Optional[Dict[str, float]] = None,
) -> List[ProbMap]:
    """
    Run every stage's full-data ensemble; returns ST1..STn

    When `timings` is given, seconds spent building auto-context and classifying
    each stage are added to its "autocontext" and "stage<k>" entries.
    """
    if feature_fingerprint is not None and model.feature_fingerprint and (
        feature_fingerprint != model.feature_fingerprint
    ):
        raise FingerprintMismatch(
            f"Model was trained with feature config {model.feature_fingerprint}, "
            f"extractor has {feature_fingerprint}"
        )
    if item.features.D != model.data_dim:
        raise DimensionMismatch(
            f"Model expects {model.data_dim} data features, got {item.features.D}"
        )
    if model.requires_prior and item.prior is None:
        raise ConfigError("This model consumes a prior probability map")
    timings = timings if timings is not None else {}
    previous = item.prior if model.requires_prior else None
    outputs: List[ProbMap] = []
    for index, stage in enumerate(model.stages, 1):
        started = time.perf_counter()
        features = stage_features(item, previous, model.mode)
        if previous is not None:
            timings["autocontext"] = timings.get("autocontext", 0.0) + (
                time.perf_counter() - started
            )
        started = time.perf_counter()
        p = predict_proba(stage.full_model, features)
        timings[f"stage{index}"] = timings.get(f"stage{index}", 0.0) + (
            time.perf_counter() - started
        )
        outputs.append(p)
        previous = p
    return outputs


def held_out_fold(model: StackModel, item_id: str) -> int:
    if model.folds == 1:
        return 0
    for fold, members in enumerate(model.fold_train_ids):
        if item_id not in members:
            return fold
    raise ShapeMismatch(f"Item {item_id} is not part of the training set")


def rebuild_context(
    model: StackModel, item: StackItem, stage: int, leak: bool = False
) -> FeatureMatrix:
    """Recompute the input features stage `stage` (1-based) was trained on for an item.

    With leak the earlier stages' full-data models, which saw the item,
    replace its held-out fold models.
    """
    fold = held_out_fold(model, item.item_id)
    previous = item.prior
    for stage_model in model.stages[: stage - 1]:
        ensemble = stage_model.full_model if leak else stage_model.fold_models[fold]
        previous = predict_proba(ensemble, stage_features(item, previous, model.mode))
    return stage_features(item, previous, model.mode)
