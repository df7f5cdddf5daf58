"""
Procedural facades: label layouts, noisy renderings and matching point
clouds with known ground truth
"""

import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from acseg.core.errors import SpecInfeasible
from acseg.core.io import write_image, write_kv_file, write_palette, write_ply
from acseg.core.types import IGNORE_LABEL, ClassPalette, LabelGrid, PointCloud
from acseg.models import FacadeSpec

logger = logging.getLogger(__name__)

LABEL_COLORS: Dict[str, Tuple[int, int, int]] = {
    "wall": (255, 255, 0),
    "window": (255, 0, 0),
    "balcony": (128, 0, 255),
    "door": (255, 128, 0),
    "roof": (0, 0, 255),
    "sky": (128, 255, 255),
    "shop": (0, 255, 0),
}

# RGB in [0, 1]; pairwise distances exceed three default noise sigmas
BASE_COLORS: Dict[str, Tuple[float, float, float]] = {
    "wall": (0.78, 0.70, 0.56),
    "window": (0.22, 0.27, 0.36),
    "balcony": (0.50, 0.55, 0.58),
    "door": (0.45, 0.25, 0.12),
    "roof": (0.55, 0.33, 0.38),
    "sky": (0.60, 0.78, 0.95),
    "shop": (0.12, 0.50, 0.26),
}
GROUND_COLOR = (0.40, 0.40, 0.40)
WINDOW_TOP_MARGIN = 2
SHOP_TOP_MARGIN = 3
SHOP_BOTTOM_MARGIN = 2
SHOP_SIDE_MARGIN = 2


@dataclass(frozen=True)
class Element:
    """Half-open pixel rectangle of one facade element"""

    name: str
    y0: int
    y1: int
    x0: int
    x1: int

    @property
    def area(self) -> int:
        return max(self.y1 - self.y0, 0) * max(self.x1 - self.x0, 0)


def facade_palette(spec: FacadeSpec) -> ClassPalette:
    return ClassPalette.from_names(spec.classes, [LABEL_COLORS[c] for c in spec.classes])


def _floor_rows(spec: FacadeSpec) -> List[Tuple[int, int]]:
    """(top, bottom) rows per floor from the top; the ground floor takes the remainder"""
    top = spec.sky_height + spec.roof_height
    body = spec.height - top
    floor_height = body // spec.floors
    if floor_height < 1:
        raise SpecInfeasible(f"{spec.floors} floors do not fit {body} body rows")
    rows = [(top + f * floor_height, top + (f + 1) * floor_height) for f in range(spec.floors)]
    rows[-1] = (rows[-1][0], spec.height)
    return rows


def _slots(spec: FacadeSpec) -> List[Tuple[int, int]]:
    if spec.window_cols == 0:
        return []
    width = spec.width // spec.window_cols
    return [(s * width, (s + 1) * width) for s in range(spec.window_cols)]


def facade_layout(spec: FacadeSpec) -> List[Element]:
    """
    Element rectangles of a facade

    Args:
        spec: layout parameters; the seed drives window jitter

    Returns:
        Bands (sky, roof) followed by windows, balconies, door and shops
    """
    if spec.sky_height + spec.roof_height >= spec.height:
        raise SpecInfeasible("Sky and roof leave no room for the facade body")
    rng = np.random.default_rng(spec.seed)
    elements = [
        Element("sky", 0, spec.sky_height, 0, spec.width),
        Element("roof", spec.sky_height, spec.sky_height + spec.roof_height, 0, spec.width),
    ]
    floors = _floor_rows(spec)
    slots = _slots(spec)
    upper = floors[:-1]
    balcony_floors = set(range(max(len(upper) - spec.balcony_rows, 0), len(upper)))

    for f, (top, bottom) in enumerate(upper):
        jy = int(rng.integers(-spec.jitter, spec.jitter + 1))
        for start, end in slots:
            jx = int(rng.integers(-spec.jitter, spec.jitter + 1))
            x0 = start + (end - start - spec.window_width) // 2 + jx
            y0 = top + WINDOW_TOP_MARGIN + jy
            window = Element("window", y0, y0 + spec.window_height, x0, x0 + spec.window_width)
            _require_inside(window, top, bottom, start, end)
            elements.append(window)
            if f in balcony_floors:
                balcony = Element(
                    "balcony", window.y1, window.y1 + spec.balcony_height, x0 - 1, window.x1 + 1
                )
                _require_inside(balcony, top, bottom, start, end)
                elements.append(balcony)

    top, bottom = floors[-1]
    door_slot = None
    if spec.door_width > 0 and spec.door_height > 0:
        if slots:
            door_slot = len(slots) // 2 if spec.door_slot is None else spec.door_slot
            if not 0 <= door_slot < len(slots):
                raise SpecInfeasible(f"Door slot {door_slot} outside 0..{len(slots) - 1}")
            start, end = slots[door_slot]
        else:
            start, end = 0, spec.width
        x0 = start + (end - start - spec.door_width) // 2
        door = Element("door", bottom - spec.door_height, bottom, x0, x0 + spec.door_width)
        _require_inside(door, top, bottom, start, end)
        elements.append(door)
    for s, (start, end) in enumerate(slots):
        if s == door_slot:
            continue
        shop = Element(
            "shop",
            top + SHOP_TOP_MARGIN,
            bottom - SHOP_BOTTOM_MARGIN,
            start + SHOP_SIDE_MARGIN,
            end - SHOP_SIDE_MARGIN,
        )
        if shop.area > 0:
            elements.append(shop)

    missing = {e.name for e in elements if e.area > 0} - set(spec.classes)
    if missing:
        raise SpecInfeasible(f"Layout needs classes missing from the spec: {sorted(missing)}")
    return [e for e in elements if e.area > 0]


def _require_inside(e: Element, top: int, bottom: int, start: int, end: int) -> None:
    if e.y0 < top or e.y1 > bottom or e.x0 < start or e.x1 > end:
        raise SpecInfeasible(
            f"{e.name} at rows {e.y0}..{e.y1}, cols {e.x0}..{e.x1} leaves its cell"
        )


def rasterize_layout(spec: FacadeSpec, elements: List[Element]) -> np.ndarray:
    """Class index per pixel; element rectangles must not overlap"""
    index = {name: i for i, name in enumerate(spec.classes)}
    labels = np.full((spec.height, spec.width), index["wall"], dtype=np.int64)
    painted = np.zeros(labels.shape, dtype=bool)
    for e in elements:
        region = (slice(e.y0, e.y1), slice(e.x0, e.x1))
        if painted[region].any():
            raise SpecInfeasible(f"{e.name} at rows {e.y0}..{e.y1} overlaps another element")
        painted[region] = True
        labels[region] = index[e.name]
    return labels


def label_histogram(spec: FacadeSpec) -> Dict[str, int]:
    """Pixel count per class from the layout geometry alone"""
    floors = _floor_rows(spec)
    slots = _slots(spec)
    windows = (len(floors) - 1) * len(slots)
    counts = {name: 0 for name in spec.classes}
    counts["sky"] = spec.sky_height * spec.width
    counts["roof"] = spec.roof_height * spec.width
    counts["window"] = windows * spec.window_width * spec.window_height
    balcony_floors = min(spec.balcony_rows, len(floors) - 1)
    counts["balcony"] = (
        balcony_floors * len(slots) * (spec.window_width + 2) * spec.balcony_height
    )
    has_door = spec.door_width > 0 and spec.door_height > 0
    counts["door"] = spec.door_width * spec.door_height if has_door else 0
    if slots:
        top, bottom = floors[-1]
        shop_rows = max(bottom - SHOP_BOTTOM_MARGIN - top - SHOP_TOP_MARGIN, 0)
        shop_cols = max(slots[0][1] - slots[0][0] - 2 * SHOP_SIDE_MARGIN, 0)
        counts["shop"] = (len(slots) - int(has_door)) * shop_rows * shop_cols
    else:
        counts["shop"] = 0
    counts["wall"] = spec.width * spec.height - sum(
        v for k, v in counts.items() if k != "wall"
    )
    return {k: v for k, v in counts.items() if k in spec.classes or v > 0}


def generate_facade(spec: FacadeSpec) -> Tuple[np.ndarray, LabelGrid]:
    """
    Render a facade image and its labels

    Args:
        spec: layout, palette subset and noise model

    Returns:
        (H x W x 3 uint8 image, LabelGrid); bit-identical for a fixed layout
    """
    labels = rasterize_layout(spec, facade_layout(spec))
    base = np.array([BASE_COLORS[name] for name in spec.classes])[labels]

    rng = np.random.default_rng([spec.seed, 0])
    phase_y, phase_x = rng.random(2)
    ys, xs = np.mgrid[0 : spec.height, 0 : spec.width]
    texture = spec.texture_amplitude * (
        np.sin(2 * np.pi * (ys / spec.texture_period + phase_y))
        * np.sin(2 * np.pi * (xs / spec.texture_period + phase_x))
    )
    noise = rng.normal(0.0, spec.noise_sigma, size=base.shape) if spec.noise_sigma else 0.0
    image = np.clip(base + texture[..., None] + noise, 0.0, 1.0)
    return np.round(image * 255.0).astype(np.uint8), LabelGrid(labels)


def cloud_area(spec: FacadeSpec, ground_depth: float = 1.0) -> float:
    """Sampled surface in square meters: facade below the sky plus the ground strip"""
    ps = spec.pixel_size
    facade = (spec.height - spec.sky_height) * spec.width * ps * ps
    return facade + spec.width * ps * ground_depth


def generate_cloud(
    spec: FacadeSpec,
    density: float,
    ground_depth: float = 1.0,
    inset_depth: float = 0.2,
    balcony_depth: float = 0.3,
) -> PointCloud:
    """
    Sample a labeled cloud of the facade on the y = 0 plane

    Windows and the door sit `inset_depth` behind the wall (+y), balconies
    stick out toward the street (-y). Ground strip points lie in front of
    the facade at z = 0 and are labeled as ignored. A `cloud_clutter` share
    of facade points takes the base color of a different class.
    """
    if density <= 0:
        raise SpecInfeasible("Point density must be positive")
    labels = rasterize_layout(spec, facade_layout(spec))
    ps = spec.pixel_size
    rng = np.random.default_rng([spec.seed, 1])
    index = {name: i for i, name in enumerate(spec.classes)}

    body_rows = spec.height - spec.sky_height
    n_facade = int(rng.poisson(density * body_rows * spec.width * ps * ps))
    rows = spec.sky_height + rng.random(n_facade) * body_rows
    cols = rng.random(n_facade) * spec.width
    point_labels = labels[rows.astype(np.int64), cols.astype(np.int64)]
    depth = np.zeros(n_facade)
    for name in ("window", "door"):
        if name in index:
            depth[point_labels == index[name]] = inset_depth
    if "balcony" in index:
        depth[point_labels == index["balcony"]] = -balcony_depth
    depth += rng.uniform(-spec.depth_noise, spec.depth_noise, n_facade)
    facade_points = np.stack([cols * ps, depth, (spec.height - rows) * ps], axis=1)
    base = np.array([BASE_COLORS[name] for name in spec.classes])
    shown = point_labels.copy()
    if spec.cloud_clutter > 0:
        clutter_rng = np.random.default_rng([spec.seed, 2])
        recolor = np.flatnonzero(clutter_rng.random(n_facade) < spec.cloud_clutter)
        offset = clutter_rng.integers(1, len(spec.classes), size=recolor.size)
        shown[recolor] = (point_labels[recolor] + offset) % len(spec.classes)
    facade_rgb = base[shown]

    n_ground = int(rng.poisson(density * spec.width * ps * ground_depth))
    ground_points = np.stack(
        [
            rng.random(n_ground) * spec.width * ps,
            -rng.random(n_ground) * ground_depth,
            rng.uniform(-spec.depth_noise, spec.depth_noise, n_ground),
        ],
        axis=1,
    )
    ground_rgb = np.tile(GROUND_COLOR, (n_ground, 1))

    rgb = np.concatenate([facade_rgb, ground_rgb])
    rgb = rgb + rng.normal(0.0, spec.noise_sigma, size=rgb.shape) if spec.noise_sigma else rgb
    colors = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    all_labels = np.concatenate([point_labels, np.full(n_ground, IGNORE_LABEL)])
    logger.debug(f"Sampled {n_facade} facade and {n_ground} ground points")
    return PointCloud(
        np.concatenate([facade_points, ground_points]), colors, all_labels
    )


def corpus_specs(base: FacadeSpec, count: int) -> List[FacadeSpec]:
    """Seeded variations of a base spec: window columns and door slot vary per item"""
    rng = np.random.default_rng(base.seed)
    specs = []
    for i in range(count):
        window_cols = int(rng.choice([2, 3, 4])) if base.window_cols else 0
        door_slot = int(rng.integers(0, window_cols)) if window_cols else None
        specs.append(
            base.model_copy(
                update={"seed": base.seed + i, "window_cols": window_cols, "door_slot": door_slot}
            )
        )
    return specs


def write_corpus(
    out_dir: str,
    spec: FacadeSpec,
    count: int = 1,
    density: Optional[float] = None,
) -> List[str]:
    """
    Write a synthetic corpus in the standard file formats

    Args:
        out_dir: target directory
        spec: base spec; item i uses seed spec.seed + i
        count: number of facades
        density: points per square meter; clouds are written when given

    Returns:
        Item stems in manifest order
    """
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    palette = facade_palette(spec)
    specs = corpus_specs(spec, count) if count > 1 else [spec]
    stems = []
    manifest_lines = []
    for item_spec in specs:
        stem = f"facade_{item_spec.seed:04d}"
        image, labels = generate_facade(item_spec)
        write_image(os.path.join(out_dir, "images", f"{stem}.png"), image)
        write_image(
            os.path.join(out_dir, "labels", f"{stem}.png"),
            palette.colors()[labels.labels],
        )
        manifest_lines.append(f"images/{stem}.png labels/{stem}.png")
        if density is not None:
            os.makedirs(os.path.join(out_dir, "clouds"), exist_ok=True)
            write_ply(
                os.path.join(out_dir, "clouds", f"{stem}.ply"),
                generate_cloud(item_spec, density),
            )
        stems.append(stem)
    write_palette(os.path.join(out_dir, "palette.txt"), palette)
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(manifest_lines) + "\n")
    write_kv_file(os.path.join(out_dir, "facade_spec.txt"), spec.model_dump())
    logger.info(f"Wrote {len(stems)} synthetic facades to {out_dir}")
    return stems
