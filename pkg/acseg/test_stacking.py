"""
Tests for fold splitting, cascade training and leakage-free context
"""

import numpy as np
import pytest
from scipy import ndimage

from acseg.core.errors import (
    ConfigError,
    DimensionMismatch,
    FingerprintMismatch,
    InvariantViolation,
    TooFewItems,
)
from acseg.core.types import FeatureMatrix, Grid, Points, ProbMap
from acseg.gbdt import predict_proba, train_ensemble
from acseg.models import GBDTConfig, StackConfig
from acseg.stacking import (
    StackItem,
    predict_stack,
    split_folds,
    train_stack,
    verify_no_leakage,
)
from acseg.stacking.stack import held_out_fold, id_fingerprint, rebuild_context, stage_features

FAST = GBDTConfig(rounds=8, shrinkage=0.3)


def _point_items(count=6, n=60, seed=0, prior=False):
    rng = np.random.default_rng(seed)
    items = []
    for k in range(count):
        values = rng.normal(size=(n, 2))
        labels = (values[:, 0] + 0.3 * rng.normal(size=n) > 0).astype(np.int64)
        labels[:2] = [0, 1]
        labels[5] = -1
        features = FeatureMatrix(values, ("f0", "f1"), Points(n))
        p = None
        if prior:
            p = ProbMap(rng.dirichlet(np.ones(2), size=n), Points(n))
        items.append(StackItem(f"item{k}", features, labels, prior=p))
    return items


def _grid_item(item_id, seed):
    rng = np.random.default_rng(seed)
    labels = np.zeros((16, 16), dtype=np.int64)
    labels[:, 8:] = 1
    values = labels[..., None] + rng.normal(0, 0.8, size=(16, 16, 1))
    image = np.where(labels[..., None] == 1, 200, 50).astype(np.uint8).repeat(3, axis=2)
    features = FeatureMatrix.from_grid(values, ["v"])
    return StackItem(item_id, features, labels.ravel(), image=image)


def test_split_folds_partition():
    fold_of = split_folds(10, 4, seed=3)
    sizes = sorted(np.bincount(fold_of, minlength=4).tolist())
    assert sizes == [2, 2, 3, 3]
    assert np.array_equal(fold_of, split_folds(10, 4, seed=3))
    assert (split_folds(5, 1) == 0).all()
    with pytest.raises(TooFewItems):
        split_folds(3, 4)
    with pytest.raises(ConfigError):
        split_folds(3, 0)


def test_train_stack_records_every_stage():
    items = _point_items()
    cfg = StackConfig(stages=2, folds=3, gbdt=FAST)
    result = train_stack(items, 2, cfg, mode="3d", feature_fingerprint="abc")
    model = result.model
    assert len(model.stages) == 2
    assert all(len(stage.fold_models) == 3 for stage in model.stages)
    assert len(result.cross_predictions) == 2
    assert [r.stage for r in model.reports] == [1, 2]
    assert model.reports[0].autocontext_share is None
    assert 0.0 <= model.reports[1].autocontext_share <= 1.0
    assert model.reports[0].held_out_accuracy > 0.7
    assert model.stages[1].full_model.D == 2 + 3
    assert "stage1" in result.timings and "stage2" in result.timings


def test_fold_models_never_see_held_out_items():
    items = _point_items()
    cfg = StackConfig(stages=2, folds=3, gbdt=FAST)
    model = train_stack(items, 2, cfg, mode="3d").model
    ids = [item.item_id for item in items]
    fold_of = split_folds(len(items), 3, cfg.seed)
    for i, item_id in enumerate(ids):
        fold = held_out_fold(model, item_id)
        assert fold == fold_of[i]
        assert item_id not in model.fold_train_ids[fold]
    verify_no_leakage(model, ids, fold_of)

    listed = [list(members) for members in model.fold_train_ids]
    model.fold_train_ids[0].append(ids[int(np.flatnonzero(fold_of == 0)[0])])
    with pytest.raises(InvariantViolation):
        verify_no_leakage(model, ids, fold_of)
    model.fold_train_ids[:] = listed


def test_fold_model_trained_with_held_out_item_is_detected():
    items = _point_items()
    cfg = StackConfig(stages=2, folds=3, gbdt=FAST)
    model = train_stack(items, 2, cfg, mode="3d").model
    ids = [item.item_id for item in items]
    fold_of = split_folds(len(items), 3, cfg.seed)

    # refit fold 0 of stage 1 on every item, held-out ones included
    X = np.concatenate([item.features.values for item in items])
    y = np.concatenate([item.labels for item in items])
    stage = model.stages[0]
    stage.fold_models[0] = train_ensemble(X[y >= 0], y[y >= 0], 2, cfg=FAST)
    stage.fold_fingerprints[0] = id_fingerprint(ids)
    assert set(model.fold_train_ids[0]).isdisjoint(ids[i] for i in np.flatnonzero(fold_of == 0))
    with pytest.raises(InvariantViolation):
        verify_no_leakage(model, ids, fold_of)


def test_rebuilt_context_matches_training_inputs():
    """Held-out predictions reproduce the training context; full models would leak"""
    items = _point_items()
    cfg = StackConfig(stages=2, folds=3, gbdt=FAST)
    result = train_stack(items, 2, cfg, mode="3d")
    for i, item in enumerate(items):
        trained = stage_features(item, result.cross_predictions[0][i], "3d")
        rebuilt = rebuild_context(result.model, item, 2)
        assert np.array_equal(rebuilt.values, trained.values)
    leaked = [rebuild_context(result.model, item, 2, leak=True) for item in items]
    assert any(
        not np.array_equal(l.values, stage_features(item, p, "3d").values)
        for l, item, p in zip(leaked, items, result.cross_predictions[0])
    )


def test_single_fold_uses_self_predictions():
    items = _point_items(count=2)
    result = train_stack(items, 2, StackConfig(stages=2, folds=1, gbdt=FAST), mode="3d")
    model = result.model
    assert len(model.stages[0].fold_models) == 1
    assert model.stages[0].fold_models[0] is model.stages[0].full_model
    outputs = predict_stack(model, items[0])
    assert np.allclose(outputs[0].probs, result.cross_predictions[0][0].probs)


def test_thread_count_does_not_change_results():
    items = _point_items(seed=4)
    cfg = StackConfig(stages=2, folds=3, gbdt=GBDTConfig(rounds=6, subsample=0.8, seed=2))
    serial = train_stack(items, 2, cfg, mode="3d", threads=1)
    parallel = train_stack(items, 2, cfg, mode="3d", threads=3)
    for a, b in zip(serial.cross_predictions[-1], parallel.cross_predictions[-1]):
        assert np.array_equal(a.probs, b.probs)


def test_predict_stack_checks_inputs():
    items = _point_items()
    model = train_stack(
        items, 2, StackConfig(stages=1, folds=2, gbdt=FAST), mode="3d", feature_fingerprint="abc"
    ).model
    assert len(predict_stack(model, items[0], "abc")) == 1
    timings = {}
    predict_stack(model, items[0], "abc", timings)
    assert set(timings) == {"stage1"}
    with pytest.raises(FingerprintMismatch):
        predict_stack(model, items[0], "other")
    wide = FeatureMatrix(np.zeros((60, 3)), ("a", "b", "c"), Points(60))
    with pytest.raises(DimensionMismatch):
        predict_stack(model, StackItem("x", wide))


def test_prior_is_required_when_trained_with_one():
    items = _point_items(prior=True)
    model = train_stack(items, 2, StackConfig(stages=1, folds=2, gbdt=FAST), mode="3d").model
    assert model.requires_prior
    assert model.stages[0].full_model.D == 2 + 3
    bare = StackItem("bare", items[0].features)
    with pytest.raises(ConfigError):
        predict_stack(model, bare)


def test_too_few_items_for_folds():
    with pytest.raises(TooFewItems):
        train_stack(_point_items(count=2), 2, StackConfig(folds=4, gbdt=FAST), mode="3d")


def test_grid_stack_uses_image_context():
    items = [_grid_item(f"g{k}", k) for k in range(4)]
    result = train_stack(items, 2, StackConfig(stages=2, folds=2, gbdt=FAST), mode="2d")
    assert result.model.stages[1].full_model.D == 1 + 14 * 2 + 1
    outputs = predict_stack(result.model, items[0])
    assert outputs[1].geometry == Grid(16, 16)
    labels = items[0].labels
    accuracy = (np.argmax(outputs[1].probs, axis=1) == labels).mean()
    assert accuracy > 0.85


def test_single_stage_equals_one_ensemble():
    items = _point_items(seed=5)
    model = train_stack(items, 2, StackConfig(stages=1, folds=3, gbdt=FAST), mode="3d").model
    X = np.concatenate([item.features.values for item in items])
    y = np.concatenate([item.labels for item in items])
    direct = train_ensemble(X, y, 2, cfg=FAST)
    for item in items:
        (staged,) = predict_stack(model, item)
        assert np.array_equal(staged.probs, predict_proba(direct, item.features).probs)


def _isolated_pixels(labels):
    count = 0
    for c in np.unique(labels):
        components, n = ndimage.label(labels == c, structure=np.ones((3, 3)))
        count += int((np.bincount(components.ravel(), minlength=n + 1)[1:] == 1).sum())
    return count


def test_later_stages_remove_isolated_pixels():
    items = [_grid_item(f"g{k}", k) for k in range(4)]
    model = train_stack(items, 2, StackConfig(stages=3, folds=2, gbdt=FAST), mode="2d").model
    outputs = predict_stack(model, _grid_item("unseen", 11))
    first = np.argmax(outputs[0].probs, axis=1).reshape(16, 16)
    last = np.argmax(outputs[2].probs, axis=1).reshape(16, 16)
    assert _isolated_pixels(first) > 0
    assert _isolated_pixels(last) < _isolated_pixels(first)


def test_predict_stack_times_each_phase():
    items = _point_items()
    model = train_stack(items, 2, StackConfig(stages=2, folds=2, gbdt=FAST), mode="3d").model
    timings = {}
    predict_stack(model, items[0], timings=timings)
    predict_stack(model, items[1], timings=timings)
    assert set(timings) == {"autocontext", "stage1", "stage2"}
    assert all(seconds >= 0.0 for seconds in timings.values())
