# Staged cascade trained by stacked generalization
from acseg.stacking.stack import (
    StackItem,
    StackModel,
    StageModel,
    predict_stack,
    split_folds,
    train_stack,
    verify_no_leakage,
)

__all__ = [
    "StackItem",
    "StackModel",
    "StageModel",
    "predict_stack",
    "split_folds",
    "train_stack",
    "verify_no_leakage",
]
