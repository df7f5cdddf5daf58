# Multiclass boosted decision trees
from acseg.gbdt.ensemble import TreeEnsemble, predict_proba, train_ensemble
from acseg.gbdt.tree import DecisionTree

__all__ = ["DecisionTree", "TreeEnsemble", "predict_proba", "train_ensemble"]
