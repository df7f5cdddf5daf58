"""
Immutable domain types: palette, label grids, probability maps, feature
matrices and point clouds
"""

from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from acseg.core.errors import DimensionMismatch, ShapeMismatch

IGNORE_LABEL = -1


def _frozen(array: np.ndarray, dtype=None) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True, order="C")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Grid:
    width: int
    height: int

    @property
    def size(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class Points:
    n: int

    @property
    def size(self) -> int:
        return self.n


Geometry = Union[Grid, Points]


@dataclass(frozen=True)
class PaletteEntry:
    index: int
    rgb: Tuple[int, int, int]
    name: str


@dataclass(frozen=True)
class ClassPalette:
    """Ordered class list; indices are exactly 0..C-1 and colors are unique"""

    entries: Tuple[PaletteEntry, ...]
    ignore_colors: Tuple[Tuple[int, int, int], ...] = ()

    def __post_init__(self):
        entries = tuple(sorted(self.entries, key=lambda e: e.index))
        if [e.index for e in entries] != list(range(len(entries))):
            raise ShapeMismatch("Palette indices must be exactly 0..C-1")
        colors = [tuple(int(v) for v in e.rgb) for e in entries]
        if len(set(colors)) != len(colors):
            raise ShapeMismatch("Palette colors must be pairwise distinct")
        if set(colors) & set(self.ignore_colors):
            raise ShapeMismatch("Ignore colors overlap palette colors")
        object.__setattr__(self, "entries", entries)

    @property
    def C(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> List[str]:
        return [e.name for e in self.entries]

    def colors(self) -> np.ndarray:
        return np.array([e.rgb for e in self.entries], dtype=np.uint8)

    def index_of(self, name: str) -> int:
        for entry in self.entries:
            if entry.name == name:
                return entry.index
        raise KeyError(name)

    def __iter__(self) -> Iterator[PaletteEntry]:
        return iter(self.entries)

    @classmethod
    def from_names(
        cls, names: Sequence[str], colors: Sequence[Tuple[int, int, int]]
    ) -> "ClassPalette":
        return cls(
            tuple(
                PaletteEntry(i, tuple(int(v) for v in rgb), name)
                for i, (name, rgb) in enumerate(zip(names, colors))
            )
        )


@dataclass(frozen=True)
class LabelGrid:
    """Row-major per-pixel class indices with an optional ignore mask"""

    labels: np.ndarray
    ignore: Optional[np.ndarray] = None

    def __post_init__(self):
        labels = _frozen(self.labels, np.int64)
        if labels.ndim != 2:
            raise ShapeMismatch(f"LabelGrid needs a 2-D array, got {labels.shape}")
        object.__setattr__(self, "labels", labels)
        if self.ignore is not None:
            ignore = _frozen(self.ignore, bool)
            if ignore.shape != labels.shape:
                raise ShapeMismatch("Ignore mask shape differs from labels")
            object.__setattr__(self, "ignore", ignore if ignore.any() else None)

    @property
    def height(self) -> int:
        return int(self.labels.shape[0])

    @property
    def width(self) -> int:
        return int(self.labels.shape[1])

    @property
    def geometry(self) -> Grid:
        return Grid(self.width, self.height)

    def valid_mask(self) -> np.ndarray:
        if self.ignore is None:
            return np.ones(self.labels.shape, dtype=bool)
        return ~self.ignore

    def flat(self) -> np.ndarray:
        """Labels as a flat vector with ignored pixels set to -1"""
        out = self.labels.ravel().copy()
        if self.ignore is not None:
            out[self.ignore.ravel()] = IGNORE_LABEL
        return out

    def check_classes(self, C: int) -> None:
        valid = self.labels[self.valid_mask()]
        if valid.size and (valid.min() < 0 or valid.max() >= C):
            raise ShapeMismatch(f"Label outside 0..{C - 1}")


@dataclass(frozen=True)
class ProbMap:
    """Per-element class distributions over a grid or a point set"""

    probs: np.ndarray
    geometry: Geometry

    def __post_init__(self):
        probs = _frozen(self.probs, np.float64)
        if probs.ndim != 2 or probs.shape[0] != self.geometry.size:
            raise ShapeMismatch(
                f"ProbMap of shape {probs.shape} does not fit {self.geometry}"
            )
        if probs.size:
            if probs.min() < 0.0 or probs.max() > 1.0 + 1e-12:
                raise ShapeMismatch("Probabilities outside [0, 1]")
            if np.abs(probs.sum(axis=1) - 1.0).max() > 1e-6:
                raise ShapeMismatch("Probability rows do not sum to 1")
        object.__setattr__(self, "probs", probs)

    @property
    def C(self) -> int:
        return int(self.probs.shape[1])

    @property
    def element_count(self) -> int:
        return int(self.probs.shape[0])

    def as_grid(self) -> np.ndarray:
        """(height, width, C) view of a grid map"""
        if not isinstance(self.geometry, Grid):
            raise ShapeMismatch("ProbMap is not on a grid")
        return self.probs.reshape(self.geometry.height, self.geometry.width, self.C)

    @classmethod
    def uniform(cls, geometry: Geometry, C: int) -> "ProbMap":
        return cls(np.full((geometry.size, C), 1.0 / C), geometry)

    @classmethod
    def normalized(cls, scores: np.ndarray, geometry: Geometry) -> "ProbMap":
        scores = np.clip(np.asarray(scores, dtype=np.float64), 0.0, None)
        totals = scores.sum(axis=1, keepdims=True)
        C = scores.shape[1]
        safe = np.where(totals > 0, totals, 1.0)
        probs = np.where(totals > 0, scores / safe, 1.0 / C)
        return cls(probs, geometry)


@dataclass(frozen=True)
class FeatureMatrix:
    """Dense per-element feature vectors with named channels"""

    values: np.ndarray
    channel_names: Tuple[str, ...]
    geometry: Geometry

    def __post_init__(self):
        values = _frozen(self.values, np.float64)
        names = tuple(self.channel_names)
        if values.ndim != 2 or values.shape[0] != self.geometry.size:
            raise ShapeMismatch(
                f"FeatureMatrix of shape {values.shape} does not fit {self.geometry}"
            )
        if values.shape[1] != len(names):
            raise DimensionMismatch(
                f"{values.shape[1]} channels but {len(names)} channel names"
            )
        if len(set(names)) != len(names):
            raise DimensionMismatch("Channel names are not unique")
        if not np.isfinite(values).all():
            bad = names[int(np.argwhere(~np.isfinite(values))[0, 1])]
            raise ShapeMismatch(f"Non-finite value in channel {bad}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "channel_names", names)

    @property
    def D(self) -> int:
        return int(self.values.shape[1])

    @property
    def element_count(self) -> int:
        return int(self.values.shape[0])

    def as_grid(self) -> np.ndarray:
        if not isinstance(self.geometry, Grid):
            raise ShapeMismatch("FeatureMatrix is not on a grid")
        return self.values.reshape(self.geometry.height, self.geometry.width, self.D)

    @classmethod
    def from_grid(
        cls, channels: np.ndarray, names: Sequence[str]
    ) -> "FeatureMatrix":
        """Build from a (height, width, D) array"""
        height, width, depth = channels.shape
        return cls(channels.reshape(height * width, depth), tuple(names), Grid(width, height))

    @staticmethod
    def concat(parts: Sequence["FeatureMatrix"]) -> "FeatureMatrix":
        if not parts:
            raise DimensionMismatch("Nothing to concatenate")
        geometry = parts[0].geometry
        for part in parts[1:]:
            if part.geometry != geometry:
                raise ShapeMismatch(f"Geometry {part.geometry} differs from {geometry}")
        values = np.concatenate([p.values for p in parts], axis=1)
        names = tuple(name for p in parts for name in p.channel_names)
        return FeatureMatrix(values, names, geometry)


@dataclass(frozen=True)
class PointCloud:
    """Points in meters with colors; labels use -1 for ignored points"""

    points: np.ndarray
    colors: np.ndarray
    labels: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    degenerate: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        points = _frozen(self.points, np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] < 1:
            raise ShapeMismatch(f"Point array must be n x 3 with n >= 1, got {points.shape}")
        n = points.shape[0]
        colors = _frozen(self.colors, np.uint8)
        if colors.shape != (n, 3):
            raise ShapeMismatch("Colors must be n x 3")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "colors", colors)
        if self.labels is not None:
            labels = _frozen(self.labels, np.int64)
            if labels.shape != (n,):
                raise ShapeMismatch("Labels must have one entry per point")
            object.__setattr__(self, "labels", labels)
        if self.normals is not None:
            normals = _frozen(self.normals, np.float64)
            if normals.shape != (n, 3):
                raise ShapeMismatch("Normals must be n x 3")
            if np.abs(np.linalg.norm(normals, axis=1) - 1.0).max() > 1e-6:
                raise ShapeMismatch("Normals must have unit length")
            object.__setattr__(self, "normals", normals)
        if self.degenerate is not None:
            object.__setattr__(self, "degenerate", _frozen(self.degenerate, bool))

    @property
    def n(self) -> int:
        return int(self.points.shape[0])

    @property
    def geometry(self) -> Points:
        return Points(self.n)

    def with_normals(
        self, normals: np.ndarray, degenerate: Optional[np.ndarray] = None
    ) -> "PointCloud":
        return PointCloud(self.points, self.colors, self.labels, normals, degenerate)

    def with_labels(self, labels: np.ndarray) -> "PointCloud":
        return PointCloud(self.points, self.colors, labels, self.normals, self.degenerate)

    def valid_mask(self) -> np.ndarray:
        if self.labels is None:
            return np.zeros(self.n, dtype=bool)
        return self.labels != IGNORE_LABEL


def map_labeling(p: ProbMap) -> Union[LabelGrid, np.ndarray]:
    """MAP labels; ties resolve to the lowest class index"""
    labels = np.argmax(p.probs, axis=1)
    if isinstance(p.geometry, Grid):
        return LabelGrid(labels.reshape(p.geometry.height, p.geometry.width))
    return labels


def flat_labels(labels: Union[LabelGrid, np.ndarray]) -> np.ndarray:
    if isinstance(labels, LabelGrid):
        return labels.flat()
    return np.asarray(labels, dtype=np.int64)
