"""
Quantile-sketched split candidates per feature
"""

from typing import List, Tuple

import numpy as np


def feature_thresholds(column: np.ndarray, max_bins: int) -> np.ndarray:
    """Candidate thresholds for one feature column.

    With at most max_bins distinct values every gap between neighbors is a
    candidate (its midpoint); otherwise thresholds sit at the distinct
    interior quantiles of the column.
    """
    values = np.unique(column)
    if values.size <= max_bins:
        return (values[:-1] + values[1:]) / 2.0
    qs = np.quantile(column, np.arange(1, max_bins) / max_bins)
    qs = np.unique(qs)
    # a threshold at the minimum would leave the left side empty
    return qs[qs > values[0]]


def bin_features(
    values: np.ndarray, max_bins: int
) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Bin matrix (n, D) with bin b meaning thresholds[b-1] <= x < thresholds[b]"""
    n, D = values.shape
    bins = np.empty((n, D), dtype=np.int32)
    thresholds: List[np.ndarray] = []
    for d in range(D):
        cuts = feature_thresholds(values[:, d], max_bins)
        thresholds.append(cuts)
        bins[:, d] = np.searchsorted(cuts, values[:, d], side="right")
    return bins, thresholds
