"""
Per-pixel image feature bank: filter responses, dense HOG, uniform LBP,
location and color, and row/column averages
"""

import hashlib
import json
import logging
import os
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel
from scipy.ndimage import correlate1d
from skimage.color import rgb2gray, rgb2lab

from acseg.core.errors import ConfigError, ImageTooSmall, ShapeMismatch
from acseg.core.io import read_scalar_raster
from acseg.core.types import FeatureMatrix, Grid
from acseg.models import FeatureConfig2D

logger = logging.getLogger(__name__)

MIN_IMAGE_SIZE = 16
LAB_CHANNELS = ("L", "a", "b")
LBP_CODES = 59
HOG_EPS = 1e-6


def feature_fingerprint(*configs: BaseModel) -> str:
    """md5 of the canonical JSON of the feature configs"""
    payload = json.dumps([c.model_dump() for c in configs], sort_keys=True)
    return hashlib.md5(payload.encode()).hexdigest()


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeMismatch(f"Expected an H x W x 3 image, got {image.shape}")
    return image


def gaussian_kernel(sigma: float, order: int = 0) -> np.ndarray:
    """Sampled Gaussian (order 0), its derivative (1) or second derivative (2)"""
    radius = int(4.0 * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    if order == 0:
        return g
    if order == 1:
        # correlation weights, so a rising ramp gives a positive response
        return x / sigma**2 * g
    d2 = (x**2 / sigma**4 - 1.0 / sigma**2) * g
    return d2 - d2.mean()


def _separable(channel: np.ndarray, ky: np.ndarray, kx: np.ndarray) -> np.ndarray:
    out = correlate1d(channel, ky, axis=0, mode="reflect")
    return correlate1d(out, kx, axis=1, mode="reflect")


def filter_bank(
    image: np.ndarray, cfg: Optional[FeatureConfig2D] = None
) -> FeatureMatrix:
    """Gaussian, Laplacian-of-Gaussian and derivative responses on CIELab"""
    cfg = cfg or FeatureConfig2D()
    image = _check_image(image)
    height, width = image.shape[:2]
    if min(height, width) < MIN_IMAGE_SIZE:
        raise ImageTooSmall(
            f"Image {width}x{height} is below the {MIN_IMAGE_SIZE}px minimum"
        )
    lab = rgb2lab(image)
    channels: List[np.ndarray] = []
    names: List[str] = []

    for sigma in cfg.gaussian_sigmas:
        g = gaussian_kernel(sigma)
        for c, cname in enumerate(LAB_CHANNELS):
            channels.append(_separable(lab[..., c], g, g))
            names.append(f"gauss_{cname}_s{sigma:g}")

    lum = lab[..., 0]
    for sigma in cfg.log_sigmas:
        g, d2 = gaussian_kernel(sigma), gaussian_kernel(sigma, 2)
        channels.append(_separable(lum, g, d2) + _separable(lum, d2, g))
        names.append(f"log_L_s{sigma:g}")

    for sigma in cfg.derivative_sigmas:
        g, d1 = gaussian_kernel(sigma), gaussian_kernel(sigma, 1)
        channels.append(_separable(lum, g, d1))
        names.append(f"dx_L_s{sigma:g}")
        channels.append(_separable(lum, d1, g))
        names.append(f"dy_L_s{sigma:g}")

    return FeatureMatrix.from_grid(np.stack(channels, axis=-1), names)


def hog_dense(image: np.ndarray, cfg: Optional[FeatureConfig2D] = None) -> FeatureMatrix:
    """Per-pixel L2-Hys normalized orientation histogram of the containing cell.

    Gradients are forward differences on luminance with symmetric border
    extension. Each cell is normalized within the 2x2 block anchored at it
    (clipped at the right and bottom border).
    """
    cfg = cfg or FeatureConfig2D()
    image = _check_image(image)
    height, width = image.shape[:2]
    cell, bins = cfg.hog_cell, cfg.hog_bins
    lum = rgb2gray(image)

    padded = np.pad(lum, ((0, 1), (0, 1)), mode="symmetric")
    gx = padded[:height, 1:] - padded[:height, :width]
    gy = padded[1:, :width] - padded[:height, :width]
    magnitude = np.hypot(gx, gy)
    angle = np.mod(np.arctan2(gy, gx), np.pi)
    orientation = np.minimum((angle / (np.pi / bins)).astype(np.int64), bins - 1)

    ncy, ncx = -(-height // cell), -(-width // cell)
    ys, xs = np.mgrid[0:height, 0:width]
    cell_index = (ys // cell) * ncx + (xs // cell)
    hist = np.bincount(
        (cell_index * bins + orientation).ravel(),
        weights=magnitude.ravel(),
        minlength=ncy * ncx * bins,
    ).reshape(ncy, ncx, bins)

    # zero cells past the border make every block sum a clipped block sum
    padded_hist = np.zeros((ncy + 1, ncx + 1, bins))
    padded_hist[:ncy, :ncx] = hist
    offsets = [(0, 0), (0, 1), (1, 0), (1, 1)]
    block_cells = [padded_hist[dy : dy + ncy, dx : dx + ncx] for dy, dx in offsets]
    norm1 = np.sqrt(sum((b**2).sum(axis=-1) for b in block_cells) + HOG_EPS**2)
    clipped = [np.minimum(b / norm1[..., None], cfg.hog_clip) for b in block_cells]
    norm2 = np.sqrt(sum((c**2).sum(axis=-1) for c in clipped) + HOG_EPS**2)
    normalized = clipped[0] / norm2[..., None]

    per_pixel = normalized[ys // cell, xs // cell]
    names = [f"hog_b{b}" for b in range(bins)]
    return FeatureMatrix.from_grid(per_pixel, names)


def lbp_neighbor_offsets(radius: int = 1) -> List[tuple]:
    """(dy, dx) of the 8 samples, counter-clockwise from east"""
    unit = [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)]
    return [(dy * radius, dx * radius) for dy, dx in unit]


def _transitions(pattern: int) -> int:
    bits = [(pattern >> p) & 1 for p in range(8)]
    return sum(bits[p] != bits[(p + 1) % 8] for p in range(8))


def uniform_code_table() -> np.ndarray:
    """Pattern -> code: 0 -> 0, other uniform patterns ascending -> 1..57, rest -> 58"""
    table = np.full(256, LBP_CODES - 1, dtype=np.int64)
    code = 0
    for pattern in range(256):
        if _transitions(pattern) <= 2:
            table[pattern] = code
            code += 1
    return table


_UNIFORM_CODES = uniform_code_table()


def lbp_codes(image: np.ndarray, radius: int = 1) -> np.ndarray:
    """Uniform LBP code per pixel; a bit is set iff the neighbor is strictly brighter"""
    lum = rgb2gray(_check_image(image))
    height, width = lum.shape
    padded = np.pad(lum, radius, mode="symmetric")
    pattern = np.zeros((height, width), dtype=np.int64)
    for bit, (dy, dx) in enumerate(lbp_neighbor_offsets(radius)):
        neighbor = padded[radius + dy : radius + dy + height, radius + dx : radius + dx + width]
        pattern |= (neighbor > lum).astype(np.int64) << bit
    return _UNIFORM_CODES[pattern]


def lbp(image: np.ndarray, cfg: Optional[FeatureConfig2D] = None) -> FeatureMatrix:
    """Code channel plus the normalized 59-bin code histogram of each cell"""
    cfg = cfg or FeatureConfig2D()
    codes = lbp_codes(image, cfg.lbp_radius)
    height, width = codes.shape
    cell = cfg.lbp_cell
    ncy, ncx = -(-height // cell), -(-width // cell)
    ys, xs = np.mgrid[0:height, 0:width]
    cell_index = (ys // cell) * ncx + (xs // cell)
    hist = np.bincount(
        (cell_index * LBP_CODES + codes).ravel(), minlength=ncy * ncx * LBP_CODES
    ).reshape(ncy * ncx, LBP_CODES).astype(np.float64)
    hist /= hist.sum(axis=1, keepdims=True)
    per_pixel = hist[cell_index]
    stacked = np.concatenate([codes[..., None].astype(np.float64), per_pixel], axis=-1)
    names = ["lbp_code"] + [f"lbp_hist{c}" for c in range(LBP_CODES)]
    return FeatureMatrix.from_grid(stacked, names)


def location_color(image: np.ndarray) -> FeatureMatrix:
    image = _check_image(image)
    height, width = image.shape[:2]
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    channels = [
        xs / max(width - 1, 1),
        ys / max(height - 1, 1),
        *(image[..., c] / 255.0 for c in range(3)),
    ]
    return FeatureMatrix.from_grid(
        np.stack(channels, axis=-1), ["loc_x", "loc_y", "rgb_r", "rgb_g", "rgb_b"]
    )


def row_col_averages(f: FeatureMatrix) -> FeatureMatrix:
    """Row mean and column mean of every channel, interleaved per channel"""
    grid = f.as_grid()
    height, width, depth = grid.shape
    row_mean = np.broadcast_to(grid.mean(axis=1, keepdims=True), grid.shape)
    col_mean = np.broadcast_to(grid.mean(axis=0, keepdims=True), grid.shape)
    out = np.empty((height, width, 2 * depth))
    out[..., 0::2] = row_mean
    out[..., 1::2] = col_mean
    names: List[str] = []
    for name in f.channel_names:
        names.extend([f"{name}_rowavg", f"{name}_colavg"])
    return FeatureMatrix.from_grid(out, names)


def load_extra_channels(cfg: FeatureConfig2D, stem: str) -> Dict[str, np.ndarray]:
    """Score rasters matched by filename stem in each configured directory"""
    extra: Dict[str, np.ndarray] = {}
    for directory in cfg.extra_channels:
        candidates = [
            os.path.join(directory, name)
            for name in sorted(os.listdir(directory))
            if os.path.splitext(name)[0] == stem
        ]
        if not candidates:
            raise ConfigError(f"No extra channel for {stem} in {directory}")
        key = os.path.basename(os.path.normpath(directory))
        extra[key] = read_scalar_raster(candidates[0])
    return extra


def assemble_image_features(
    image: np.ndarray,
    cfg: Optional[FeatureConfig2D] = None,
    extra: Optional[Dict[str, np.ndarray]] = None,
) -> FeatureMatrix:
    """
    Concatenate the enabled feature groups in a fixed order

    Args:
        image: H x W x 3 uint8 image
        cfg: feature configuration
        extra: named per-pixel score rasters appended after the groups

    Returns:
        FeatureMatrix on the image grid
    """
    cfg = cfg or FeatureConfig2D()
    image = _check_image(image)
    height, width = image.shape[:2]
    groups = set(cfg.groups)
    parts: List[FeatureMatrix] = []

    bank = None
    if "filter_bank" in groups or "row_col" in groups:
        bank = filter_bank(image, cfg)
    if "filter_bank" in groups:
        parts.append(bank)
    if "hog" in groups:
        parts.append(hog_dense(image, cfg))
    if "lbp" in groups:
        parts.append(lbp(image, cfg))
    if "location_color" in groups:
        parts.append(location_color(image))
    if "row_col" in groups:
        parts.append(row_col_averages(bank))

    for key in sorted(extra or {}):
        raster = np.asarray(extra[key], dtype=np.float64)
        if raster.shape != (height, width):
            raise ShapeMismatch(f"Extra channel {key} has shape {raster.shape}")
        parts.append(FeatureMatrix(raster.reshape(-1, 1), (f"extra_{key}",), Grid(width, height)))

    return FeatureMatrix.concat(parts)


def image_feature_dim(cfg: Optional[FeatureConfig2D] = None, n_extra: int = 0) -> int:
    """Width of assemble_image_features for a config"""
    cfg = cfg or FeatureConfig2D()
    bank = 3 * len(cfg.gaussian_sigmas) + len(cfg.log_sigmas) + 2 * len(cfg.derivative_sigmas)
    widths = {
        "filter_bank": bank,
        "hog": cfg.hog_bins,
        "lbp": 1 + LBP_CODES,
        "location_color": 5,
        "row_col": 2 * bank,
    }
    return sum(widths[g] for g in set(cfg.groups)) + n_extra
