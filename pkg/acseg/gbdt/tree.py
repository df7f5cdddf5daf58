"""
Depth-limited regression trees fitted by Newton steps on histogram bins
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np


@dataclass(frozen=True)
class DecisionTree:
    """Array-encoded binary tree; internal nodes send x to the left iff x < threshold"""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    class_index: int

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    @property
    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=np.int64)
        for node in range(self.n_nodes):
            if self.feature[node] >= 0:
                depths[self.left[node]] = depths[node] + 1
                depths[self.right[node]] = depths[node] + 1
        return int(depths.max())

    def split_features(self) -> np.ndarray:
        return self.feature[self.feature >= 0]

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node id per row"""
        nodes = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        for _ in range(self.depth):
            feat = self.feature[nodes]
            internal = feat >= 0
            if not internal.any():
                break
            x = X[rows, np.where(internal, feat, 0)]
            go_left = x < self.threshold[nodes]
            nxt = np.where(go_left, self.left[nodes], self.right[nodes])
            nodes = np.where(internal, nxt, nodes)
        return nodes

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def scaled(self, factor: float) -> "DecisionTree":
        return DecisionTree(
            self.feature, self.threshold, self.left, self.right, self.value * factor,
            self.class_index,
        )


@dataclass
class _Node:
    rows: np.ndarray
    depth: int
    grad_hist: np.ndarray
    hess_hist: np.ndarray


class TreeGrower:
    """Histogram split search shared by all trees of one training run.

    Args:
        bins: (n, D) bin indices
        thresholds: per-feature candidate thresholds
        max_depth: maximum tree depth
        l2: L2 regularization on leaf values
        min_child_weight: minimum hessian mass per child
    """

    def __init__(
        self,
        bins: np.ndarray,
        thresholds: List[np.ndarray],
        max_depth: int,
        l2: float,
        min_child_weight: float,
    ):
        self.n, self.D = bins.shape
        self.thresholds = thresholds
        self.n_thresholds = np.array([t.size for t in thresholds], dtype=np.int64)
        self.B = int(max(1, self.n_thresholds.max(initial=0) + 1))
        self.offset_bins = bins.astype(np.int32) + np.arange(self.D, dtype=np.int32) * self.B
        self.max_depth = max_depth
        self.l2 = l2
        self.min_child_weight = min_child_weight
        split_index = np.arange(self.B - 1)
        self.candidate_mask = split_index[None, :] < self.n_thresholds[:, None]

    def _histogram(self, rows: np.ndarray, weights: np.ndarray) -> np.ndarray:
        flat = np.bincount(
            self.offset_bins[rows].ravel(),
            weights=np.repeat(weights[rows], self.D),
            minlength=self.D * self.B,
        )
        return flat.reshape(self.D, self.B)

    def _best_split(
        self, node: _Node, grad_total: float, hess_total: float
    ) -> Optional[Tuple[int, int]]:
        if self.B < 2:
            return None
        grad_left = np.cumsum(node.grad_hist, axis=1)[:, :-1]
        hess_left = np.cumsum(node.hess_hist, axis=1)[:, :-1]
        grad_right = grad_total - grad_left
        hess_right = hess_total - hess_left
        valid = (
            self.candidate_mask
            & (hess_left >= self.min_child_weight)
            & (hess_right >= self.min_child_weight)
        )
        if not valid.any():
            return None
        parent = grad_total**2 / (hess_total + self.l2)
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = (
                grad_left**2 / (hess_left + self.l2)
                + grad_right**2 / (hess_right + self.l2)
                - parent
            )
        gain = np.where(valid, gain, -np.inf)
        # first maximum: lowest feature, then lowest threshold
        best = int(np.argmax(gain))
        feature, split = divmod(best, self.B - 1)
        if not gain[feature, split] > 0.0:
            return None
        return feature, split

    def grow(
        self,
        grad: np.ndarray,
        hess: np.ndarray,
        rows: np.ndarray,
        class_index: int,
        C: int,
        step: float,
    ) -> DecisionTree:
        """Grow one tree on `rows`; leaves hold step * -G / (H + l2) for class_index"""
        feature: List[int] = []
        threshold: List[float] = []
        left: List[int] = []
        right: List[int] = []
        leaf_value: List[float] = []

        def new_node() -> int:
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            leaf_value.append(0.0)
            return len(feature) - 1

        root = _Node(rows, 0, self._histogram(rows, grad), self._histogram(rows, hess))
        queue = [(new_node(), root)]
        while queue:
            node_id, node = queue.pop(0)
            grad_total = float(grad[node.rows].sum())
            hess_total = float(hess[node.rows].sum())
            split = None
            if node.depth < self.max_depth and node.rows.size > 1:
                split = self._best_split(node, grad_total, hess_total)
            if split is None:
                leaf_value[node_id] = -step * grad_total / (hess_total + self.l2)
                continue

            feat, bin_index = split
            goes_left = self.offset_bins[node.rows, feat] - feat * self.B <= bin_index
            left_rows, right_rows = node.rows[goes_left], node.rows[~goes_left]
            if left_rows.size <= right_rows.size:
                lg, lh = self._histogram(left_rows, grad), self._histogram(left_rows, hess)
                rg, rh = node.grad_hist - lg, node.hess_hist - lh
            else:
                rg, rh = self._histogram(right_rows, grad), self._histogram(right_rows, hess)
                lg, lh = node.grad_hist - rg, node.hess_hist - rh

            feature[node_id] = feat
            threshold[node_id] = float(self.thresholds[feat][bin_index])
            left_id, right_id = new_node(), new_node()
            left[node_id], right[node_id] = left_id, right_id
            queue.append((left_id, _Node(left_rows, node.depth + 1, lg, lh)))
            queue.append((right_id, _Node(right_rows, node.depth + 1, rg, rh)))

        value = np.zeros((len(feature), C))
        value[:, class_index] = leaf_value
        return DecisionTree(
            feature=np.array(feature, dtype=np.int32),
            threshold=np.array(threshold, dtype=np.float64),
            left=np.array(left, dtype=np.int32),
            right=np.array(right, dtype=np.int32),
            value=value,
            class_index=class_index,
        )
