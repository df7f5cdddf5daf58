"""
Per-point descriptors: normals, ground and facade planes, spin images and
height/depth channels
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np
from skimage.color import rgb2lab

from acseg.core.errors import ConfigError, InsufficientPoints
from acseg.core.types import FeatureMatrix, PointCloud
from acseg.models import FeatureConfig3D
from acseg.spatial_index import PointIndex

logger = logging.getLogger(__name__)

UP = np.array([0.0, 0.0, 1.0])
# the street lies on the -y side of a facade by input convention
STREET = np.array([0.0, -1.0, 0.0])
RANK_TOL = 1e-10
TIE_TOL = 1e-9
HYPOTHESIS_BATCH = 64


@dataclass(frozen=True)
class PlaneModel:
    """Plane n.x + d = 0 with unit normal"""

    normal: np.ndarray
    offset: float
    threshold: float
    inliers: int = 0

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.normal + self.offset


def _orient_normals(normals: np.ndarray) -> np.ndarray:
    """Nonnegative z; on a z tie nonnegative y, then nonnegative x"""
    sign = np.ones(normals.shape[0])
    decided = np.zeros(normals.shape[0], dtype=bool)
    for axis in (2, 1, 0):
        component = normals[:, axis]
        clear = ~decided & (np.abs(component) > TIE_TOL)
        sign[clear] = np.where(component[clear] < 0, -1.0, 1.0)
        decided |= clear
    return normals * sign[:, None]


def estimate_normals(
    cloud: PointCloud, k: int = 16, index: Optional[PointIndex] = None
) -> PointCloud:
    """Smallest-eigenvector normals of each point's k-NN neighborhood (self included).

    Neighborhoods whose covariance has rank < 2 get +z and are flagged in
    the returned cloud's `degenerate` mask.
    """
    if k < 3:
        raise ConfigError("Normal estimation needs k >= 3")
    if cloud.n <= k:
        raise InsufficientPoints(f"{cloud.n} points cannot supply {k} neighbors")
    index = index or PointIndex(cloud.points)
    _, neighbors = index.knn(cloud.points, k)
    hood = cloud.points[neighbors]
    centered = hood - hood.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    normals = eigenvectors[:, :, 0]

    scale = np.maximum(eigenvalues[:, 2], np.finfo(float).tiny)
    rank = (eigenvalues > RANK_TOL * scale[:, None]).sum(axis=1)
    degenerate = (rank < 2) | (eigenvalues[:, 2] <= 0)
    normals = _orient_normals(normals / np.linalg.norm(normals, axis=1, keepdims=True))
    if degenerate.any():
        logger.warning(f"{int(degenerate.sum())} degenerate neighborhoods; normals set to +z")
        normals[degenerate] = UP
    return cloud.with_normals(normals, degenerate)


def _points_of(cloud: Union[PointCloud, np.ndarray]) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64)


def _refit(points: np.ndarray) -> Tuple[np.ndarray, float]:
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    normal = vt[-1]
    return normal, float(-normal @ centroid)


def ransac_plane(
    cloud: Union[PointCloud, np.ndarray],
    iterations: int = 500,
    threshold: float = 0.05,
    seed: int = 0,
    orient: Optional[np.ndarray] = None,
) -> PlaneModel:
    """
    Plane with the most inliers among random 3-point hypotheses

    Args:
        cloud: points to fit
        iterations: number of hypotheses
        threshold: inlier distance
        seed: RNG seed; the result is deterministic for a fixed seed
        orient: flip the normal to have a nonnegative dot product with this

    Returns:
        PlaneModel refitted on the winning inlier set
    """
    points = _points_of(cloud)
    n = points.shape[0]
    if n < 3:
        raise InsufficientPoints(f"RANSAC needs 3 points, got {n}")
    rng = np.random.default_rng(seed)
    samples = rng.integers(0, n, size=(iterations, 3))
    p0, p1, p2 = (points[samples[:, i]] for i in range(3))
    normals = np.cross(p1 - p0, p2 - p0)
    lengths = np.linalg.norm(normals, axis=1)
    extent = max(float(np.ptp(points, axis=0).max()), 1e-12)
    valid = lengths > 1e-12 * extent**2
    if not valid.any():
        raise InsufficientPoints("Every RANSAC sample was degenerate")

    counts = np.full(iterations, -1, dtype=np.int64)
    hypotheses = np.flatnonzero(valid)
    unit = normals[hypotheses] / lengths[hypotheses, None]
    offsets = -np.einsum("ij,ij->i", unit, p0[hypotheses])
    for start in range(0, hypotheses.size, HYPOTHESIS_BATCH):
        batch = slice(start, start + HYPOTHESIS_BATCH)
        distances = np.abs(points @ unit[batch].T + offsets[batch])
        counts[hypotheses[batch]] = (distances <= threshold).sum(axis=0)
    best = int(np.argmax(counts))
    position = int(np.searchsorted(hypotheses, best))
    best_normal, best_offset = unit[position], offsets[position]

    inliers = np.abs(points @ best_normal + best_offset) <= threshold
    normal, offset = _refit(points[inliers])
    if orient is not None and normal @ orient < 0:
        normal, offset = -normal, -offset
    refit_inliers = int((np.abs(points @ normal + offset) <= threshold).sum())
    logger.debug(f"RANSAC plane {normal.round(4)} with {refit_inliers}/{n} inliers")
    return PlaneModel(normal, offset, threshold, refit_inliers)


def fit_ground_and_facade(
    cloud: PointCloud, cfg: Optional[FeatureConfig3D] = None
) -> Tuple[PlaneModel, PlaneModel]:
    """Ground plane from the lowest z share, facade plane from the rest"""
    cfg = cfg or FeatureConfig3D()
    z = cloud.points[:, 2]
    low = z <= np.quantile(z, cfg.ground_fraction)
    ground = ransac_plane(
        cloud.points[low], cfg.ransac_iterations, cfg.ransac_threshold, cfg.seed, UP
    )
    rest = cloud.points[~low] if (~low).sum() >= 3 else cloud.points
    facade = ransac_plane(
        rest, cfg.ransac_iterations, cfg.ransac_threshold, cfg.seed + 1, STREET
    )
    return ground, facade


def spin_images(
    cloud: PointCloud,
    index: Optional[PointIndex] = None,
    radius: float = 0.5,
    bins: int = 8,
    queries: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Spin image per queried point as (m, bins * bins), rows growing with beta.

    alpha is the distance from the point's normal axis over [0, radius],
    beta the signed height along the normal over [-radius, radius]; both
    are bilinearly spread over bin centers and each image is L1-normalized
    (all zero without neighbors).
    """
    if cloud.normals is None:
        raise ConfigError("Spin images need normals")
    index = index or PointIndex(cloud.points)
    queries = np.arange(cloud.n) if queries is None else np.asarray(queries, dtype=np.int64)
    m = queries.size
    lims, neighbors, _ = index.radius_neighbors(cloud.points[queries], radius)
    owner = np.repeat(np.arange(m), np.diff(lims))
    keep = neighbors != queries[owner]
    owner, neighbors = owner[keep], neighbors[keep]

    offsets = cloud.points[neighbors] - cloud.points[queries[owner]]
    axis = cloud.normals[queries[owner]]
    beta = np.einsum("ij,ij->i", offsets, axis)
    alpha = np.sqrt(np.maximum((offsets**2).sum(axis=1) - beta**2, 0.0))

    a = np.clip(alpha / radius * bins - 0.5, 0.0, bins - 1)
    b = np.clip((beta + radius) / (2.0 * radius) * bins - 0.5, 0.0, bins - 1)
    a0 = np.minimum(np.floor(a).astype(np.int64), max(bins - 2, 0))
    b0 = np.minimum(np.floor(b).astype(np.int64), max(bins - 2, 0))
    fa, fb = a - a0, b - b0
    a1, b1 = np.minimum(a0 + 1, bins - 1), np.minimum(b0 + 1, bins - 1)

    hist = np.zeros(m * bins * bins)
    base = owner * bins * bins
    for rows, cols, weight in (
        (b0, a0, (1 - fb) * (1 - fa)),
        (b0, a1, (1 - fb) * fa),
        (b1, a0, fb * (1 - fa)),
        (b1, a1, fb * fa),
    ):
        hist += np.bincount(base + rows * bins + cols, weights=weight, minlength=hist.size)
    hist = hist.reshape(m, bins * bins)
    counts = np.bincount(owner, minlength=m).astype(np.float64)
    return np.where(counts[:, None] > 0, hist / np.maximum(counts, 1)[:, None], 0.0)


def spin_image(
    cloud: PointCloud, point: int, radius: float = 0.5, bins: int = 8
) -> np.ndarray:
    """Spin image of a single point as a (bins, bins) array"""
    return spin_images(cloud, radius=radius, bins=bins, queries=np.array([point])).reshape(
        bins, bins
    )


def point_feature_names(cfg: FeatureConfig3D) -> List[str]:
    names = ["knn_r", "knn_g", "knn_b", "knn_L", "knn_a", "knn_bb"]
    names += ["normal_x", "normal_y", "normal_z"]
    names += [f"spin_b{r}_a{c}" for r in range(cfg.spin_bins) for c in range(cfg.spin_bins)]
    names += ["height", "facade_depth", "inverse_height"]
    if cfg.pad_to is not None:
        if cfg.pad_to < len(names):
            raise ConfigError(f"pad_to {cfg.pad_to} is below the {len(names)} channels")
        names += [f"reserved_{i}" for i in range(cfg.pad_to - len(names))]
    return names


def assemble_point_features(
    cloud: PointCloud,
    planes: Tuple[PlaneModel, PlaneModel],
    cfg: Optional[FeatureConfig3D] = None,
    index: Optional[PointIndex] = None,
) -> FeatureMatrix:
    """
    Concatenate point descriptors in a fixed order

    Args:
        cloud: cloud with normals
        planes: (ground, facade) planes
        cfg: descriptor settings
        index: shared neighbor index of the cloud

    Returns:
        FeatureMatrix over the cloud's points
    """
    cfg = cfg or FeatureConfig3D()
    if cloud.normals is None:
        raise ConfigError("Point features need normals")
    names = point_feature_names(cfg)
    index = index or PointIndex(cloud.points)
    ground, facade = planes

    _, neighbors = index.knn(cloud.points, min(cfg.k, cloud.n))
    mean_rgb = cloud.colors[neighbors].astype(np.float64).mean(axis=1) / 255.0
    lab = rgb2lab(mean_rgb[None, :, :])[0]
    spin = spin_images(cloud, index, cfg.spin_radius, cfg.spin_bins)
    z = cloud.points[:, 2]
    geometric = np.stack(
        [
            ground.signed_distance(cloud.points),
            facade.signed_distance(cloud.points),
            z.max() - z,
        ],
        axis=1,
    )
    values = np.concatenate([mean_rgb, lab, cloud.normals, spin, geometric], axis=1)
    if values.shape[1] < len(names):
        padding = np.zeros((cloud.n, len(names) - values.shape[1]))
        values = np.concatenate([values, padding], axis=1)
    return FeatureMatrix(values, tuple(names), cloud.geometry)
