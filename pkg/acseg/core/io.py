"""
File formats: palettes, label rasters, PLY clouds, correspondences,
key=value configs and probability dumps
"""

import json
import logging
import os
from typing import Any, Dict, List, Tuple

import numpy as np
from PIL import Image

from acseg.core.errors import ConfigError, MissingPair, ShapeMismatch, UnknownColor
from acseg.core.types import (
    ClassPalette,
    Grid,
    LabelGrid,
    PaletteEntry,
    PointCloud,
    Points,
    ProbMap,
)
from acseg.models import parse_value

logger = logging.getLogger(__name__)


def _pack(rgb: np.ndarray) -> np.ndarray:
    rgb = rgb.astype(np.int64)
    return (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]


def read_palette(path: str) -> ClassPalette:
    """Read `index R G B name` lines; `ignore R G B` lines declare void colors"""
    entries: List[PaletteEntry] = []
    ignore: List[Tuple[int, int, int]] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                if parts[0] == "ignore":
                    ignore.append(tuple(int(v) for v in parts[1:4]))
                    continue
                index = int(parts[0])
                rgb = tuple(int(v) for v in parts[1:4])
                name = " ".join(parts[4:]) or f"class{index}"
            except (ValueError, IndexError) as e:
                raise ConfigError(f"{path}:{line_no}: malformed palette line") from e
            if len(rgb) != 3 or any(not 0 <= v <= 255 for v in rgb):
                raise ConfigError(f"{path}:{line_no}: color must be three bytes")
            entries.append(PaletteEntry(index, rgb, name))
    palette = ClassPalette(tuple(entries), tuple(ignore))
    logger.debug(f"Read palette with {palette.C} classes from {path}")
    return palette


def write_palette(path: str, palette: ClassPalette) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for entry in palette:
            r, g, b = entry.rgb
            f.write(f"{entry.index} {r} {g} {b} {entry.name}\n")
        for r, g, b in palette.ignore_colors:
            f.write(f"ignore {r} {g} {b}\n")


def encode_labels(raster: np.ndarray, palette: ClassPalette) -> LabelGrid:
    """Map a color label raster to class indices"""
    raster = np.asarray(raster)
    if raster.ndim != 3 or raster.shape[2] < 3:
        raise ShapeMismatch(f"Label raster must be H x W x 3, got {raster.shape}")
    keys = _pack(raster[..., :3])
    palette_keys = _pack(palette.colors())
    order = np.argsort(palette_keys)
    sorted_keys = palette_keys[order]
    pos = np.clip(np.searchsorted(sorted_keys, keys), 0, len(sorted_keys) - 1)
    known = sorted_keys[pos] == keys
    labels = np.where(known, order[pos], 0)

    ignore = np.zeros(keys.shape, dtype=bool)
    if palette.ignore_colors:
        ignore = np.isin(keys, _pack(np.array(palette.ignore_colors)))
    unknown = ~known & ~ignore
    if unknown.any():
        y, x = np.argwhere(unknown)[0]
        raise UnknownColor(int(x), int(y), tuple(raster[y, x, :3]))
    return LabelGrid(labels, ignore)


def render_labels(grid: LabelGrid, palette: ClassPalette) -> np.ndarray:
    """Palette rendering; ignored pixels take the first ignore color (black if none)"""
    colors = palette.colors()
    raster = colors[np.clip(grid.labels, 0, palette.C - 1)]
    if grid.ignore is not None:
        void = palette.ignore_colors[0] if palette.ignore_colors else (0, 0, 0)
        raster[grid.ignore] = void
    return raster


def read_image(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise MissingPair(f"Image not found: {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def write_image(path: str, raster: np.ndarray) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    Image.fromarray(np.asarray(raster, dtype=np.uint8)).save(path)


def read_label_raster(path: str, palette: ClassPalette) -> LabelGrid:
    if not os.path.exists(path):
        raise MissingPair(f"Label raster not found: {path}")
    return encode_labels(read_image(path), palette)


def read_scalar_raster(path: str) -> np.ndarray:
    """Single-channel float raster from .npy or any Pillow-readable file"""
    if path.endswith(".npy"):
        data = np.load(path)
    else:
        with Image.open(path) as img:
            data = np.asarray(img.convert("F"), dtype=np.float64)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ShapeMismatch(f"Extra channel {path} is not single-channel")
    return data


def write_ply(path: str, cloud: PointCloud) -> None:
    """ASCII PLY with x y z red green blue [label]"""
    has_labels = cloud.labels is not None
    with open(path, "w", encoding="utf-8") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {cloud.n}\n")
        for name in ("x", "y", "z"):
            f.write(f"property double {name}\n")
        for name in ("red", "green", "blue"):
            f.write(f"property uchar {name}\n")
        if has_labels:
            f.write("property int label\n")
        f.write("end_header\n")
        for i in range(cloud.n):
            x, y, z = cloud.points[i]
            r, g, b = cloud.colors[i]
            row = f"{float(x)!r} {float(y)!r} {float(z)!r} {int(r)} {int(g)} {int(b)}"
            if has_labels:
                row += f" {int(cloud.labels[i])}"
            f.write(row + "\n")


def read_ply(path: str) -> PointCloud:
    if not os.path.exists(path):
        raise MissingPair(f"Point cloud not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        if f.readline().strip() != "ply":
            raise ShapeMismatch(f"{path} is not a PLY file")
        count = 0
        properties: List[str] = []
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "format" and parts[1] != "ascii":
                raise ShapeMismatch(f"{path}: only ASCII PLY is supported")
            if parts[:2] == ["element", "vertex"]:
                count = int(parts[2])
            elif parts[0] == "property":
                properties.append(parts[-1])
            elif parts[0] == "end_header":
                break
        data = np.loadtxt(f, ndmin=2, max_rows=count) if count else np.zeros((0, len(properties)))
    missing = {"x", "y", "z", "red", "green", "blue"} - set(properties)
    if missing or data.shape[0] != count:
        raise ShapeMismatch(f"{path}: malformed vertex block")
    col = {name: i for i, name in enumerate(properties)}
    points = data[:, [col["x"], col["y"], col["z"]]]
    colors = data[:, [col["red"], col["green"], col["blue"]]].astype(np.uint8)
    labels = data[:, col["label"]].astype(np.int64) if "label" in col else None
    return PointCloud(points, colors, labels)


def read_correspondences(path: str) -> List[List[int]]:
    """Lines of `target source source ...`; targets are 0..T-1"""
    members: Dict[int, List[int]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                ids = [int(v) for v in parts]
            except ValueError as e:
                raise ShapeMismatch(f"{path}:{line_no}: non-integer id") from e
            members.setdefault(ids[0], []).extend(ids[1:])
    count = max(members) + 1 if members else 0
    return [members.get(t, []) for t in range(count)]


def write_correspondences(path: str, membership: List[List[int]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for target, sources in enumerate(membership):
            f.write(" ".join(str(v) for v in [target, *sources]) + "\n")


def read_kv_file(path: str) -> Dict[str, Any]:
    """`key = value` lines; values parsed as JSON when possible"""
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    items: Dict[str, Any] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            items[key] = parse_value(value)
    return items


def write_kv_file(path: str, items: Dict[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for key, value in items.items():
            f.write(f"{key} = {json.dumps(value)}\n")


def save_probmap(path: str, p: ProbMap) -> None:
    if isinstance(p.geometry, Grid):
        shape = np.array([p.geometry.width, p.geometry.height])
    else:
        shape = np.array([p.geometry.n])
    np.savez_compressed(path, probs=p.probs, shape=shape)


def load_probmap(path: str) -> ProbMap:
    if not os.path.exists(path):
        raise MissingPair(f"Probability map not found: {path}")
    with np.load(path) as data:
        shape = data["shape"]
        geometry = Grid(int(shape[0]), int(shape[1])) if len(shape) == 2 else Points(int(shape[0]))
        return ProbMap(data["probs"], geometry)

