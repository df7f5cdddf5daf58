"""
Auto-context features: statistics of a previous stage's class
probabilities fed back as inputs to the next stage
"""

import logging
from typing import List, Tuple

import numpy as np
from scipy import ndimage as ndi

from acseg.core.errors import ShapeMismatch
from acseg.core.types import FeatureMatrix, Grid, Points, ProbMap

logger = logging.getLogger(__name__)

COLOR_MIN_PIXELS = 10
COLOR_FALLBACK = -50.0
COLOR_REGULARIZER = 1e-3
COLOR_QUANTILE = 75.0
# (rows above/below, cols left/right) reach of the neighborhood rectangles
NEIGHBORHOOD_REACH = 5
FOUR_CONNECTED = ndi.generate_binary_structure(2, 1)


def autocontext_dim(C: int, mode: str = "2d") -> int:
    return 14 * C + 1 if mode == "2d" else C + 1


def _grid_probs(p: ProbMap) -> np.ndarray:
    if not isinstance(p.geometry, Grid):
        raise ShapeMismatch("Auto-context family needs a grid ProbMap")
    return p.as_grid()


def _class_names(prefix: str, C: int) -> List[str]:
    return [f"{prefix}_c{c}" for c in range(C)]


def ac_class_probability(p: ProbMap) -> np.ndarray:
    return np.array(p.probs)


def ac_entropy(p: ProbMap) -> np.ndarray:
    """Shannon entropy in nats with 0 ln 0 = 0, as an (n, 1) column"""
    probs = p.probs
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=1, keepdims=True)


def ac_row_col(p: ProbMap) -> np.ndarray:
    """Row label fractions, column label fractions, row means, column means"""
    probs = _grid_probs(p)
    height, width, C = probs.shape
    onehot = np.eye(C)[np.argmax(probs, axis=2)]
    families = [
        onehot.mean(axis=1, keepdims=True),
        onehot.mean(axis=0, keepdims=True),
        probs.mean(axis=1, keepdims=True),
        probs.mean(axis=0, keepdims=True),
    ]
    out = np.concatenate([np.broadcast_to(f, probs.shape) for f in families], axis=2)
    return out.reshape(height * width, 4 * C)


def ac_nearest_class_distance(labels: np.ndarray, C: int) -> np.ndarray:
    """Euclidean then Manhattan distance to the nearest pixel of each class.

    Classes missing from the labeling get width + height in both channels.
    """
    labels = np.asarray(labels)
    height, width = labels.shape
    sentinel = float(width + height)
    euclid = np.full((height, width, C), sentinel)
    manhattan = np.full((height, width, C), sentinel)
    for c in range(C):
        outside = labels != c
        if outside.all():
            continue
        euclid[..., c] = ndi.distance_transform_edt(outside)
        manhattan[..., c] = ndi.distance_transform_cdt(outside, metric="taxicab")
    return np.concatenate([euclid, manhattan], axis=2).reshape(height * width, 2 * C)


def ac_class_color_model(image: np.ndarray, p: ProbMap) -> np.ndarray:
    """Per-class Gaussian log-density of each pixel's RGB (scaled to [0, 1]).

    Each class model is fitted on pixels whose probability for that class
    exceeds the class channel's 75th percentile.
    """
    grid = _grid_probs(p)
    probs = p.probs
    C = p.C
    image = np.asarray(image)
    if image.shape[:2] != grid.shape[:2]:
        raise ShapeMismatch("Image does not match the ProbMap grid")
    rgb = image.reshape(-1, 3).astype(np.float64) / 255.0
    out = np.full((rgb.shape[0], C), COLOR_FALLBACK)
    for c in range(C):
        threshold = np.percentile(probs[:, c], COLOR_QUANTILE)
        chosen = rgb[probs[:, c] > threshold]
        if chosen.shape[0] < COLOR_MIN_PIXELS:
            logger.warning(f"Class {c} color model falls back: {chosen.shape[0]} pixels")
            continue
        mean = chosen.mean(axis=0)
        centered = chosen - mean
        cov = centered.T @ centered / chosen.shape[0] + COLOR_REGULARIZER * np.eye(3)
        _, logdet = np.linalg.slogdet(cov)
        diff = rgb - mean
        mahal = np.einsum("ij,ij->i", diff, np.linalg.solve(cov, diff.T).T)
        out[:, c] = -0.5 * (mahal + logdet + 3.0 * np.log(2.0 * np.pi))
    return out


def ac_bounding_box(p: ProbMap) -> np.ndarray:
    """Inside-a-component-box indicator and max box-mean probability per class"""
    probs = _grid_probs(p)
    height, width, C = probs.shape
    labels = np.argmax(probs, axis=2)
    inside = np.zeros((height, width, C))
    box_mean = np.zeros((height, width, C))
    for c in range(C):
        components, count = ndi.label(labels == c, structure=FOUR_CONNECTED)
        if count == 0:
            continue
        channel = probs[..., c]
        for box in ndi.find_objects(components):
            inside[box + (c,)] = 1.0
            mean = channel[box].mean()
            box_mean[box + (c,)] = np.maximum(box_mean[box + (c,)], mean)
    return np.concatenate([inside, box_mean], axis=2).reshape(height * width, 2 * C)


def neighborhood_windows(
    height: int, width: int
) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
    """Clipped (y0, y1, x0, x1) half-open bounds of the above/below/left/right rectangles"""
    r = NEIGHBORHOOD_REACH
    ys, xs = np.mgrid[0:height, 0:width]
    raw = [
        (ys - r, ys, xs - r, xs + r),
        (ys + 1, ys + r + 1, xs - r, xs + r),
        (ys - r, ys + r, xs - r, xs),
        (ys - r, ys + r, xs + 1, xs + r + 1),
    ]
    windows = []
    for y0, y1, x0, x1 in raw:
        windows.append(
            (
                np.clip(y0, 0, height),
                np.clip(y1, 0, height),
                np.clip(x0, 0, width),
                np.clip(x1, 0, width),
            )
        )
    return windows


def ac_neighborhood_stats(p: ProbMap) -> np.ndarray:
    """Mean class probability above, below, left and right of each pixel"""
    probs = _grid_probs(p)
    height, width, C = probs.shape
    integral = np.zeros((height + 1, width + 1, C))
    integral[1:, 1:] = probs.cumsum(axis=0).cumsum(axis=1)
    families = []
    for y0, y1, x0, x1 in neighborhood_windows(height, width):
        total = integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]
        area = ((y1 - y0) * (x1 - x0))[..., None]
        families.append(np.where(area > 0, total / np.maximum(area, 1), 0.0))
    return np.concatenate(families, axis=2).reshape(height * width, 4 * C)


def assemble_autocontext_2d(image: np.ndarray, p: ProbMap) -> FeatureMatrix:
    """
    All 2D families in fixed order: probability (C), entropy (1),
    row/column (4C), distances (2C), color model (C), boxes (2C),
    neighborhood (4C)
    """
    probs = _grid_probs(p)
    C = p.C
    labels = np.argmax(probs, axis=2)
    blocks = [
        (ac_class_probability(p), _class_names("ac_prob", C)),
        (ac_entropy(p), ["ac_entropy"]),
        (
            ac_row_col(p),
            _class_names("ac_rowfrac", C)
            + _class_names("ac_colfrac", C)
            + _class_names("ac_rowmean", C)
            + _class_names("ac_colmean", C),
        ),
        (
            ac_nearest_class_distance(labels, C),
            _class_names("ac_edt", C) + _class_names("ac_l1dt", C),
        ),
        (ac_class_color_model(image, p), _class_names("ac_color", C)),
        (ac_bounding_box(p), _class_names("ac_inbox", C) + _class_names("ac_boxmean", C)),
        (
            ac_neighborhood_stats(p),
            _class_names("ac_above", C)
            + _class_names("ac_below", C)
            + _class_names("ac_left", C)
            + _class_names("ac_right", C),
        ),
    ]
    values = np.concatenate([b for b, _ in blocks], axis=1)
    names = [n for _, block_names in blocks for n in block_names]
    return FeatureMatrix(values, tuple(names), p.geometry)


def assemble_autocontext_3d(p: ProbMap) -> FeatureMatrix:
    """Point variant: class probabilities and entropy"""
    if not isinstance(p.geometry, Points):
        raise ShapeMismatch("Point auto-context needs a point ProbMap")
    values = np.concatenate([ac_class_probability(p), ac_entropy(p)], axis=1)
    names = _class_names("ac_prob", p.C) + ["ac_entropy"]
    return FeatureMatrix(values, tuple(names), p.geometry)
