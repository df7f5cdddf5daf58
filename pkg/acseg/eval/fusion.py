"""
Combining image and point predictions, and majority-vote projection
between element sets linked by correspondence lists
"""

import logging
from typing import List, Optional, Sequence

import numpy as np

from acseg.core.errors import ConfigError, ShapeMismatch
from acseg.core.types import ProbMap

logger = logging.getLogger(__name__)

UNLABELED = -1
FUSION_MODES = ("mean", "product")


def fuse_modalities(
    p2d: ProbMap,
    p3d: ProbMap,
    coverage: Optional[np.ndarray] = None,
    mode: str = "mean",
) -> ProbMap:
    """
    Per-element fusion of projected image probabilities with point probabilities

    Args:
        p2d: image-side distributions carried onto the points
        p3d: point classifier distributions
        coverage: elements that received image evidence; the rest keep p3d
        mode: "mean" (renormalized average) or "product" (renormalized product)

    Returns:
        ProbMap on p3d's geometry
    """
    if mode not in FUSION_MODES:
        raise ConfigError(f"Unknown fusion mode {mode}")
    if p2d.probs.shape != p3d.probs.shape:
        raise ShapeMismatch(
            f"Cannot fuse {p2d.probs.shape} image probabilities with {p3d.probs.shape}"
        )
    if mode == "mean":
        fused = 0.5 * (p2d.probs + p3d.probs)
    else:
        fused = p2d.probs * p3d.probs
        # disjoint supports: fall back to the mean
        empty = fused.sum(axis=1) <= 0
        fused[empty] = 0.5 * (p2d.probs[empty] + p3d.probs[empty])
    fused = fused / fused.sum(axis=1, keepdims=True)
    if coverage is not None:
        coverage = np.asarray(coverage, dtype=bool)
        if coverage.shape != (p3d.element_count,):
            raise ShapeMismatch("Coverage mask does not match the element count")
        fused = np.where(coverage[:, None], fused, p3d.probs)
    return ProbMap(fused, p3d.geometry)


def project_majority(labels: np.ndarray, membership: Sequence[Sequence[int]]) -> np.ndarray:
    """Modal source label per target; ties go to the lowest class, empty lists to UNLABELED"""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.full(len(membership), UNLABELED, dtype=np.int64)
    for target, members in enumerate(membership):
        if len(members) == 0:
            continue
        idx = np.asarray(members, dtype=np.int64)
        if idx.min() < 0 or idx.max() >= labels.size:
            raise ShapeMismatch(f"Target {target} references a missing source element")
        votes = labels[idx]
        votes = votes[votes >= 0]
        if votes.size:
            out[target] = int(np.argmax(np.bincount(votes)))
    return out


def project_probabilities(p: ProbMap, membership: Sequence[Sequence[int]]) -> tuple:
    """Average source distributions per target.

    Returns (probs, coverage); uncovered targets get a uniform row.
    """
    count = len(membership)
    probs = np.full((count, p.C), 1.0 / p.C)
    coverage = np.zeros(count, dtype=bool)
    for target, members in enumerate(membership):
        if len(members) == 0:
            continue
        idx = np.asarray(members, dtype=np.int64)
        if idx.min() < 0 or idx.max() >= p.element_count:
            raise ShapeMismatch(f"Target {target} references a missing source element")
        probs[target] = p.probs[idx].mean(axis=0)
        coverage[target] = True
    uncovered = count - int(coverage.sum())
    if uncovered:
        logger.info(f"{uncovered}/{count} targets have no source elements")
    return probs, coverage


def invert_membership(membership: Sequence[Sequence[int]], n_sources: int) -> List[List[int]]:
    """Swap the roles of targets and sources for back-projection"""
    inverted: List[List[int]] = [[] for _ in range(n_sources)]
    for target, members in enumerate(membership):
        for source in members:
            if not 0 <= source < n_sources:
                raise ShapeMismatch(f"Target {target} references a missing source element")
            inverted[source].append(target)
    return inverted
