"""
FAISS-backed exact neighbor queries over 3D points
"""

import logging
from typing import Tuple

import faiss
import numpy as np

from acseg.core.errors import TooFewPoints

logger = logging.getLogger(__name__)


class PointIndex:
    """Read-only exact L2 index built once per cloud.

    Coordinates are centered before the float32 conversion FAISS needs so
    that georeferenced clouds keep millimeter precision.
    """

    def __init__(self, points: np.ndarray):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] == 0:
            raise TooFewPoints(f"Cannot index point array of shape {points.shape}")
        self.n = points.shape[0]
        self.origin = points.mean(axis=0)
        self.index = faiss.IndexFlatL2(3)
        self.index.add(self._prepare(points))
        logger.debug(f"Built point index over {self.n} points")

    def _prepare(self, queries: np.ndarray) -> np.ndarray:
        centered = np.asarray(queries, dtype=np.float64) - self.origin
        return np.ascontiguousarray(centered, dtype=np.float32)

    def knn(self, queries: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """
        k nearest indexed points per query, nearest first

        Args:
            queries: (m, 3) query coordinates
            k: neighbors per query

        Returns:
            (squared distances, indices), both (m, k)
        """
        if k > self.n:
            raise TooFewPoints(f"Requested {k} neighbors from {self.n} points")
        distances, indices = self.index.search(self._prepare(queries), k)
        return distances.astype(np.float64), indices.astype(np.int64)

    def radius_neighbors(
        self, queries: np.ndarray, radius: float
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        All indexed points closer than radius

        Returns:
            (offsets, indices, squared distances); the neighbors of query q
            are indices[offsets[q]:offsets[q + 1]], sorted by index
        """
        lims, distances, indices = self.index.range_search(
            self._prepare(queries), float(radius) ** 2
        )
        lims = lims.astype(np.int64)
        owner = np.repeat(np.arange(lims.size - 1), np.diff(lims))
        order = np.lexsort((indices, owner))
        return lims, indices[order].astype(np.int64), distances[order].astype(np.float64)
