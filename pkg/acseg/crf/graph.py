"""
Neighbor graphs for pairwise smoothing
"""

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from acseg.core.errors import ShapeMismatch, TooFewPoints
from acseg.core.types import PointCloud
from acseg.spatial_index import PointIndex

DIAGONAL_WEIGHT = 1.0 / np.sqrt(2.0)


@dataclass(frozen=True)
class NeighborGraph:
    """Undirected weighted edges, each pair stored once with i < j"""

    n: int
    i: np.ndarray
    j: np.ndarray
    weight: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        if not (self.i.shape == self.j.shape == self.weight.shape):
            raise ShapeMismatch("Edge arrays differ in length")
        if self.i.size:
            if (self.i == self.j).any():
                raise ShapeMismatch("Self-loops are not allowed")
            if min(self.i.min(), self.j.min()) < 0 or max(self.i.max(), self.j.max()) >= self.n:
                raise ShapeMismatch("Edge endpoint outside the node range")
            if not np.isfinite(self.weight).all() or (self.weight < 0).any():
                raise ShapeMismatch("Edge weights must be finite and >= 0")

    @property
    def edge_count(self) -> int:
        return int(self.i.size)

    def degrees(self) -> np.ndarray:
        return np.bincount(np.concatenate([self.i, self.j]), minlength=self.n)


def build_grid_graph(width: int, height: int) -> NeighborGraph:
    """8-connected grid, node id y * width + x; diagonals weigh 1/sqrt(2)"""
    ids = np.arange(width * height).reshape(height, width)
    pairs = [
        (ids[:, :-1], ids[:, 1:], 1.0),
        (ids[:-1, :], ids[1:, :], 1.0),
        (ids[:-1, :-1], ids[1:, 1:], DIAGONAL_WEIGHT),
        (ids[:-1, 1:], ids[1:, :-1], DIAGONAL_WEIGHT),
    ]
    i = np.concatenate([a.ravel() for a, _, _ in pairs])
    j = np.concatenate([b.ravel() for _, b, _ in pairs])
    weight = np.concatenate([np.full(a.size, w) for a, _, w in pairs])
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    return NeighborGraph(width * height, lo, hi, weight, f"grid {width}x{height}")


def build_knn_graph(
    cloud: Union[PointCloud, np.ndarray], k: int = 4, index: Optional[PointIndex] = None
) -> NeighborGraph:
    """Symmetrized k-NN graph with unit weights"""
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
    n = points.shape[0]
    if n <= k:
        raise TooFewPoints(f"{n} points cannot supply {k} neighbors each")
    index = index or PointIndex(points)
    _, neighbors = index.knn(points, k + 1)
    not_self = neighbors != np.arange(n)[:, None]
    # rows where duplicates pushed the point itself out of the result
    missing_self = not_self.all(axis=1)
    not_self[missing_self, -1] = False
    chosen = neighbors[not_self].reshape(n, k)
    src = np.repeat(np.arange(n), k)
    dst = chosen.ravel()
    lo, hi = np.minimum(src, dst), np.maximum(src, dst)
    keys = np.unique(lo * n + hi)
    i, j = keys // n, keys % n
    return NeighborGraph(n, i, j, np.ones(keys.size), f"knn k={k}")
