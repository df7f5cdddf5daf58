"""
Directory-level evaluation: per-item and aggregate metrics as key=value
lines plus an aligned table
"""

import concurrent.futures
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from acseg.core.errors import MissingPair
from acseg.core.io import read_label_raster, read_ply
from acseg.core.types import ClassPalette
from acseg.eval.metrics import ConfusionMatrix, Metrics, metrics, paired_t_test
from acseg.models import TTestResult

logger = logging.getLogger(__name__)

RASTER_EXTENSIONS = (".png", ".bmp", ".tif", ".tiff")
CLOUD_EXTENSIONS = (".ply",)


@dataclass
class EvaluationReport:
    items: Dict[str, Metrics]
    item_matrices: Dict[str, ConfusionMatrix]
    aggregate: Metrics
    confusion: ConfusionMatrix
    comparison: Optional[TTestResult] = None
    palette_names: List[str] = field(default_factory=list)

    def overall_by_item(self) -> List[float]:
        return [self.items[stem].overall for stem in sorted(self.items)]

    def lines(self) -> List[str]:
        out = []
        for stem in sorted(self.items):
            m = self.items[stem]
            out += [
                f"item.{stem}.overall={m.overall:.6f}",
                f"item.{stem}.average={m.average:.6f}",
                f"item.{stem}.iou={m.iou:.6f}",
            ]
        m = self.aggregate
        out += [f"overall={m.overall:.6f}", f"average={m.average:.6f}", f"iou={m.iou:.6f}"]
        for c, value in sorted(m.class_accuracy.items()):
            out.append(f"class.{self._name(c)}.accuracy={value:.6f}")
        for c, value in sorted(m.class_iou.items()):
            out.append(f"class.{self._name(c)}.iou={value:.6f}")
        if self.comparison is not None:
            r = self.comparison
            out += [
                f"compare.t={r.t:.6f}",
                f"compare.p={r.p:.6g}",
                f"compare.dof={r.dof}",
                f"compare.significant={str(r.significant).lower()}",
            ]
        return out

    def table(self) -> str:
        rows = {stem: vars_of(m) for stem, m in self.items.items()}
        rows["ALL"] = vars_of(self.aggregate)
        frame = pd.DataFrame.from_dict(rows, orient="index")[["overall", "average", "iou"]]
        return frame.sort_index().to_string(float_format=lambda v: f"{v:.4f}")

    def _name(self, c: int) -> str:
        return self.palette_names[c] if c < len(self.palette_names) else str(c)


def vars_of(m: Metrics) -> Dict[str, float]:
    return {"overall": m.overall, "average": m.average, "iou": m.iou}


def _label_files(directory: str) -> Dict[str, str]:
    if not os.path.isdir(directory):
        raise MissingPair(f"Directory not found: {directory}")
    files = {}
    for name in sorted(os.listdir(directory)):
        stem, ext = os.path.splitext(name)
        if ext.lower() in RASTER_EXTENSIONS + CLOUD_EXTENSIONS:
            files.setdefault(stem, os.path.join(directory, name))
    return files


def _read_labels(path: str, palette: ClassPalette) -> np.ndarray:
    if path.lower().endswith(CLOUD_EXTENSIONS):
        cloud = read_ply(path)
        if cloud.labels is None:
            raise MissingPair(f"{path} carries no labels")
        return cloud.labels
    return read_label_raster(path, palette).flat()


def _pair_matrix(
    stem: str, pred_path: str, truth_path: str, palette: ClassPalette
) -> ConfusionMatrix:
    truth = _read_labels(truth_path, palette)
    predicted = _read_labels(pred_path, palette)
    if truth.shape != predicted.shape:
        raise MissingPair(
            f"{os.path.basename(pred_path)} and {os.path.basename(truth_path)} "
            f"differ in size ({predicted.size} vs {truth.size} elements)"
        )
    unlabeled = int(((predicted < 0) & (truth >= 0)).sum())
    if unlabeled:
        logger.warning(f"{stem}: {unlabeled} labeled elements have no prediction and are skipped")
    return ConfusionMatrix.from_labels(truth, predicted, palette.C)


def _collect(
    pred_dir: str, gt_dir: str, palette: ClassPalette, threads: int
) -> Dict[str, ConfusionMatrix]:
    truths = _label_files(gt_dir)
    predictions = _label_files(pred_dir)
    missing = sorted(set(truths) - set(predictions))
    if missing:
        raise MissingPair(f"No prediction for {', '.join(missing)} in {pred_dir}")
    if not truths:
        raise MissingPair(f"No label files in {gt_dir}")
    stems = sorted(truths)
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
        matrices = list(
            executor.map(
                lambda s: _pair_matrix(s, predictions[s], truths[s], palette), stems
            )
        )
    return dict(zip(stems, matrices))


def evaluate_run(
    pred_dir: str,
    gt_dir: str,
    palette: ClassPalette,
    compare_dir: Optional[str] = None,
    threads: int = 1,
) -> EvaluationReport:
    """
    Evaluate a prediction directory against ground truth

    Args:
        pred_dir: predicted label rasters or labeled clouds
        gt_dir: ground truth with the same file stems
        palette: class palette decoding rasters
        compare_dir: optional baseline predictions for the paired t-test
        threads: parallel item workers

    Returns:
        EvaluationReport with per-item and aggregate metrics
    """
    matrices = _collect(pred_dir, gt_dir, palette, threads)
    confusion = ConfusionMatrix.zeros(palette.C)
    for cm in matrices.values():
        confusion = confusion + cm
    items = {stem: metrics(cm) for stem, cm in matrices.items() if cm.total > 0}
    report = EvaluationReport(
        items=items,
        item_matrices=matrices,
        aggregate=metrics(confusion),
        confusion=confusion,
        palette_names=list(palette.names),
    )
    if compare_dir is not None:
        baseline = _collect(compare_dir, gt_dir, palette, threads)
        pairs: List[Tuple[float, float]] = [
            (items[s].overall, metrics(baseline[s]).overall) for s in sorted(items)
        ]
        report.comparison = paired_t_test([a for a, _ in pairs], [b for _, b in pairs])
    logger.info(
        f"Evaluated {len(matrices)} items: overall {report.aggregate.overall:.4f}, "
        f"iou {report.aggregate.iou:.4f}"
    )
    return report
