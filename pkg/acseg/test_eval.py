"""
Tests for metrics, the paired t-test, fusion and directory evaluation
"""

import os

import numpy as np
import pytest

from acseg.core.errors import DegenerateDifferences, EmptyMatrix, MissingPair, ShapeMismatch
from acseg.core.io import render_labels, write_image, write_ply
from acseg.core.types import ClassPalette, Grid, LabelGrid, PointCloud, Points, ProbMap
from acseg.eval import (
    UNLABELED,
    ConfusionMatrix,
    evaluate_run,
    fuse_modalities,
    invert_membership,
    metrics,
    paired_t_test,
    project_majority,
    project_probabilities,
)

PALETTE = ClassPalette.from_names(
    ["wall", "window", "sky"], [(255, 255, 0), (255, 0, 0), (0, 0, 255)]
)


def test_confusion_from_labels_skips_ignored():
    cm = ConfusionMatrix.from_labels(np.array([0, 1, -1, 2]), np.array([0, 2, 1, 2]), 3)
    assert cm.total == 3
    assert cm.counts[1, 2] == 1
    assert (cm + cm).total == 6


def test_confusion_skips_unlabeled_predictions():
    cm = ConfusionMatrix.from_labels(np.array([1, 1, 2]), np.array([-1, 1, 2]), 3)
    assert cm.total == 2
    assert cm.counts[0].sum() == 0


def test_metrics_perfect_prediction():
    m = metrics(ConfusionMatrix(np.diag([4, 5, 6])))
    assert (m.overall, m.average, m.iou) == (1.0, 1.0, 1.0)


def test_metrics_hand_computed():
    m = metrics(ConfusionMatrix(np.array([[3, 1], [1, 3]])))
    assert m.overall == pytest.approx(0.75)
    assert m.average == pytest.approx(0.75)
    assert m.iou == pytest.approx(0.6)


def test_metrics_absent_class_excluded():
    m = metrics(ConfusionMatrix(np.array([[3, 1, 0], [1, 3, 0], [0, 0, 0]])))
    assert set(m.class_accuracy) == {0, 1}
    assert set(m.class_iou) == {0, 1}
    assert m.iou == pytest.approx(0.6)


def test_metrics_empty_matrix():
    with pytest.raises(EmptyMatrix):
        metrics(ConfusionMatrix.zeros(3))


def test_paired_t_test_hand_computed():
    result = paired_t_test([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])
    assert result.t == pytest.approx(3.0 / (np.sqrt(2.5) / np.sqrt(5.0)))
    assert result.t == pytest.approx(4.2426, abs=1e-4)
    assert result.dof == 4
    assert result.p < 0.01
    assert result.significant


def test_paired_t_test_symmetric_null():
    result = paired_t_test([1.0, 0.0, 2.0, 0.0], [0.0, 1.0, 0.0, 2.0])
    assert result.t == pytest.approx(0.0)
    assert result.p == pytest.approx(0.5)
    assert not result.significant


def test_paired_t_test_constant_shift():
    b = np.linspace(0.5, 0.9, 5)
    result = paired_t_test(b + 1.0, b)
    assert result.t == np.inf
    assert result.significant
    shifted = paired_t_test(b + 1000.1, b + 1000.0)
    assert shifted.t == np.inf
    assert shifted.p == 0.0
    assert paired_t_test(b, b + 0.3).t == -np.inf


def test_paired_t_test_degenerate():
    with pytest.raises(DegenerateDifferences):
        paired_t_test([0.5, 0.7], [0.5, 0.7])
    with pytest.raises(ShapeMismatch):
        paired_t_test([0.5], [0.4])


def test_fuse_agreement_is_identity():
    rng = np.random.default_rng(0)
    p = ProbMap(rng.dirichlet(np.ones(4), size=20), Points(20))
    assert np.allclose(fuse_modalities(p, p).probs, p.probs)


def test_fuse_disagreeing_one_hots():
    p2d = ProbMap(np.array([[1.0, 0.0, 0.0]]), Points(1))
    p3d = ProbMap(np.array([[0.0, 1.0, 0.0]]), Points(1))
    assert np.allclose(fuse_modalities(p2d, p3d).probs, [[0.5, 0.5, 0.0]])
    # disjoint supports fall back to the mean
    assert np.allclose(fuse_modalities(p2d, p3d, mode="product").probs, [[0.5, 0.5, 0.0]])


def test_fuse_rows_normalized_and_coverage_respected():
    rng = np.random.default_rng(1)
    p2d = ProbMap(rng.dirichlet(np.ones(3), size=30), Points(30))
    p3d = ProbMap(rng.dirichlet(np.ones(3), size=30), Points(30))
    coverage = np.arange(30) % 2 == 0
    for mode in ("mean", "product"):
        fused = fuse_modalities(p2d, p3d, coverage, mode=mode)
        assert np.abs(fused.probs.sum(axis=1) - 1.0).max() < 1e-9
        assert np.array_equal(fused.probs[~coverage], p3d.probs[~coverage])


def test_fuse_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        fuse_modalities(ProbMap.uniform(Points(3), 2), ProbMap.uniform(Points(4), 2))


def test_project_majority():
    labels = np.array([0, 1, 1, 2, 2, 0, -1])
    membership = [[0, 1, 2], [3, 4, 0], [], [0, 1], [6]]
    out = project_majority(labels, membership)
    assert out.tolist() == [1, 2, UNLABELED, 0, UNLABELED]


def test_project_probabilities_and_inversion():
    p = ProbMap(np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]), Points(3))
    probs, coverage = project_probabilities(p, [[0, 1], [], [2]])
    assert np.allclose(probs, [[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]])
    assert coverage.tolist() == [True, False, True]
    assert invert_membership([[0, 1], [], [1]], 2) == [[0], [0, 2]]
    with pytest.raises(ShapeMismatch):
        invert_membership([[5]], 2)


def _write_labels(path, labels):
    write_image(path, render_labels(LabelGrid(labels), PALETTE))


def test_evaluate_run(tmp_path):
    gt = tmp_path / "gt"
    pred = tmp_path / "pred"
    base = tmp_path / "base"
    rng = np.random.default_rng(6)
    for k in range(4):
        truth = rng.integers(0, 3, size=(6, 5))
        wrong = truth.copy()
        wrong[0, : k + 1] = (wrong[0, : k + 1] + 1) % 3
        worse = truth.copy()
        worse[:2, :] = (worse[:2, :] + 1) % 3
        _write_labels(os.path.join(gt, f"item{k}.png"), truth)
        _write_labels(os.path.join(pred, f"item{k}.png"), wrong)
        _write_labels(os.path.join(base, f"item{k}.png"), worse)

    report = evaluate_run(str(pred), str(gt), PALETTE, compare_dir=str(base))
    assert report.confusion.total == 4 * 30
    assert report.aggregate.overall == pytest.approx(1.0 - 10 / 120)
    assert report.items["item0"].overall == pytest.approx(29 / 30)
    assert report.comparison is not None and report.comparison.t > 0
    lines = report.lines()
    assert f"overall={1.0 - 10 / 120:.6f}" in lines
    assert any(line.startswith("class.window.iou=") for line in lines)
    assert any(line.startswith("compare.significant=") for line in lines)
    assert "ALL" in report.table()


def test_evaluate_run_missing_prediction(tmp_path):
    _write_labels(os.path.join(tmp_path, "gt", "a.png"), np.zeros((2, 2), dtype=int))
    os.makedirs(tmp_path / "pred")
    with pytest.raises(MissingPair):
        evaluate_run(str(tmp_path / "pred"), str(tmp_path / "gt"), PALETTE)


def test_evaluate_run_size_mismatch(tmp_path):
    _write_labels(os.path.join(tmp_path, "gt", "a.png"), np.zeros((2, 2), dtype=int))
    _write_labels(os.path.join(tmp_path, "pred", "a.png"), np.zeros((3, 2), dtype=int))
    with pytest.raises(MissingPair):
        evaluate_run(str(tmp_path / "pred"), str(tmp_path / "gt"), PALETTE)


def test_probmap_grid_geometry():
    p = ProbMap.uniform(Grid(3, 2), 4)
    assert p.as_grid().shape == (2, 3, 4)


def test_evaluate_run_on_clouds_skips_unlabeled_predictions(tmp_path):
    os.makedirs(tmp_path / "gt")
    os.makedirs(tmp_path / "pred")
    points = np.arange(15.0).reshape(5, 3)
    colors = np.zeros((5, 3), dtype=np.int64)
    write_ply(
        str(tmp_path / "gt" / "c.ply"), PointCloud(points, colors, np.array([0, 1, 2, 1, -1]))
    )
    write_ply(
        str(tmp_path / "pred" / "c.ply"), PointCloud(points, colors, np.array([-1, 1, 2, 0, 2]))
    )
    report = evaluate_run(str(tmp_path / "pred"), str(tmp_path / "gt"), PALETTE)
    assert report.confusion.total == 3
    assert report.confusion.counts[0].sum() == 0
    assert report.aggregate.overall == pytest.approx(2 / 3)
