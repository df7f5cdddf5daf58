# Metrics, significance testing and 2D/3D fusion
from acseg.eval.fusion import (
    UNLABELED,
    fuse_modalities,
    invert_membership,
    project_majority,
    project_probabilities,
)
from acseg.eval.metrics import ConfusionMatrix, Metrics, metrics, paired_t_test
from acseg.eval.report import EvaluationReport, evaluate_run

__all__ = [
    "UNLABELED",
    "ConfusionMatrix",
    "EvaluationReport",
    "Metrics",
    "evaluate_run",
    "fuse_modalities",
    "invert_membership",
    "metrics",
    "paired_t_test",
    "project_majority",
    "project_probabilities",
]
