"""
Confusion matrices, accuracy/IoU metrics and the paired significance test
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Sequence

import numpy as np
from scipy import stats

from acseg.core.errors import DegenerateDifferences, EmptyMatrix, ShapeMismatch
from acseg.models import TTestResult

logger = logging.getLogger(__name__)

SIGNIFICANCE = 0.01
# Spreads within this many ulps of the sample magnitude count as zero
ZERO_SPREAD = 16


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions"""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ShapeMismatch(f"Confusion matrix must be square, got {counts.shape}")
        if (counts < 0).any():
            raise ShapeMismatch("Confusion counts must be non-negative")
        self.counts = counts

    @property
    def C(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def zeros(cls, C: int) -> "ConfusionMatrix":
        return cls(np.zeros((C, C), dtype=np.int64))

    @classmethod
    def from_labels(cls, truth: np.ndarray, predicted: np.ndarray, C: int) -> "ConfusionMatrix":
        """Accumulate flat labels; elements where either side is < 0 are skipped"""
        truth = np.asarray(truth, dtype=np.int64).ravel()
        predicted = np.asarray(predicted, dtype=np.int64).ravel()
        if truth.shape != predicted.shape:
            raise ShapeMismatch(f"{truth.size} truth labels vs {predicted.size} predictions")
        valid = (truth >= 0) & (predicted >= 0)
        codes = truth[valid] * C + predicted[valid]
        return cls(np.bincount(codes, minlength=C * C).reshape(C, C))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.C != self.C:
            raise ShapeMismatch("Cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)


@dataclass
class Metrics:
    overall: float
    average: float
    iou: float
    class_accuracy: Dict[int, float] = field(default_factory=dict)
    class_iou: Dict[int, float] = field(default_factory=dict)


def metrics(cm: ConfusionMatrix) -> Metrics:
    """
    Overall accuracy, class-average accuracy and mean IoU

    Classes absent from both ground truth and predictions are left out;
    classes only missing from the ground truth count with IoU 0 but have
    no accuracy.
    """
    if cm.total == 0:
        raise EmptyMatrix("Confusion matrix has no counts")
    counts = cm.counts.astype(np.float64)
    diag = np.diag(counts)
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    present = (rows + cols) > 0

    class_accuracy = {int(c): float(diag[c] / rows[c]) for c in np.flatnonzero(rows > 0)}
    class_iou = {
        int(c): float(diag[c] / (rows[c] + cols[c] - diag[c])) for c in np.flatnonzero(present)
    }
    return Metrics(
        overall=float(diag.sum() / cm.total),
        average=float(np.mean(list(class_accuracy.values()))),
        iou=float(np.mean(list(class_iou.values()))),
        class_accuracy=class_accuracy,
        class_iou=class_iou,
    )


def paired_t_test(
    a: Sequence[float], b: Sequence[float], alpha: float = SIGNIFICANCE
) -> TTestResult:
    """
    One-tailed paired t-test of mean(a - b) > 0

    Args:
        a: per-item scores of the candidate
        b: per-item scores of the baseline, same item order
        alpha: significance level

    Returns:
        TTestResult; zero-variance nonzero differences give t = +/-inf
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeMismatch("Paired samples must be equally long vectors")
    if a.size < 2:
        raise ShapeMismatch("Paired t-test needs at least two pairs")
    d = a - b
    dof = d.size - 1
    if not d.any():
        raise DegenerateDifferences("All paired differences are zero")
    mean = d.mean()
    sd = d.std(ddof=1)
    scale = max(1.0, float(np.abs(a).max()), float(np.abs(b).max()))
    if sd <= ZERO_SPREAD * np.finfo(np.float64).eps * scale:
        t = float(np.copysign(np.inf, mean))
        p = 0.0 if mean > 0 else 1.0
    else:
        t = float(mean / (sd / np.sqrt(d.size)))
        p = float(stats.t.sf(t, dof))
    logger.debug(f"Paired t-test: t={t:.4f}, p={p:.3g}, dof={dof}")
    return TTestResult(t=t, p=p, dof=dof, significant=p < alpha)
