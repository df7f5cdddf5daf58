"""
Pydantic models for configuration and reports of the facade segmenter
"""

import json
from typing import Any, Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from acseg.core.errors import ConfigError

FEATURE_GROUPS_2D = ("filter_bank", "hog", "lbp", "location_color", "row_col")


class StrictModel(BaseModel):
    """Base model rejecting unknown keys"""

    model_config = ConfigDict(extra="forbid")


class FeatureConfig2D(StrictModel):
    """Per-pixel image feature bank"""

    gaussian_sigmas: List[float] = Field([1.0, 2.0, 4.0], description="Gaussian scales on L, a, b")
    log_sigmas: List[float] = Field([1.0, 2.0, 4.0, 8.0], description="LoG scales on L")
    derivative_sigmas: List[float] = Field([2.0, 4.0], description="First-derivative scales on L")
    hog_cell: int = Field(8, ge=2, description="HOG cell size in pixels")
    hog_bins: int = Field(9, ge=2, description="Unsigned orientation bins")
    hog_clip: float = Field(0.2, gt=0, description="L2-Hys clipping value")
    lbp_radius: int = Field(1, ge=1, description="LBP sampling radius")
    lbp_samples: Literal[8] = Field(8, description="LBP sample count")
    lbp_cell: int = Field(16, ge=2, description="LBP histogram cell size")
    groups: List[str] = Field(list(FEATURE_GROUPS_2D), description="Enabled feature groups")
    extra_channels: List[str] = Field([], description="Directories of per-image score rasters")

    @field_validator("gaussian_sigmas", "log_sigmas", "derivative_sigmas")
    @classmethod
    def _positive_scales(cls, value: List[float]) -> List[float]:
        if any(s <= 0 for s in value):
            raise ValueError("all scales must be > 0")
        return value

    @field_validator("groups")
    @classmethod
    def _known_groups(cls, value: List[str]) -> List[str]:
        if not value:
            raise ValueError("at least one feature group must be enabled")
        unknown = set(value) - set(FEATURE_GROUPS_2D)
        if unknown:
            raise ValueError(f"unknown feature groups {sorted(unknown)}")
        return value


class FeatureConfig3D(StrictModel):
    """Per-point descriptor settings"""

    k: int = Field(16, ge=3, description="Neighbors for normals and colors")
    spin_bins: int = Field(8, ge=1)
    spin_radius: float = Field(0.5, gt=0, description="Spin image support in meters")
    ransac_iterations: int = Field(500, ge=1)
    ransac_threshold: float = Field(0.05, gt=0, description="Inlier distance in meters")
    ground_fraction: float = Field(0.2, gt=0, lt=1, description="Lowest z share for the ground fit")
    seed: int = 0
    pad_to: Optional[int] = Field(None, description="Zero-pad descriptors to this width")


class GBDTConfig(StrictModel):
    """Boosted tree hyperparameters"""

    rounds: int = Field(200, ge=0, le=200)
    max_depth: int = Field(2, ge=1, le=8)
    shrinkage: float = Field(0.1, gt=0, le=1)
    subsample: float = Field(1.0, gt=0, le=1)
    max_bins: int = Field(256, ge=2)
    l2: float = Field(1.0, ge=0)
    min_child_weight: float = Field(1e-3, ge=0)
    class_balanced: bool = False
    early_stop_tol: float = 1e-7
    early_stop_rounds: int = Field(10, ge=1)
    seed: int = 0


class StackConfig(StrictModel):
    """Staged cascade training"""

    stages: int = Field(3, ge=1)
    folds: int = Field(4, ge=1)
    seed: int = 0
    pixel_subsample: float = Field(1.0, gt=0, le=1, description="Per-item training pixel share")
    gbdt: GBDTConfig = GBDTConfig()


class CRFConfig(StrictModel):
    """Potts smoothing"""

    lambdas: List[float] = Field(
        [float(v) for v in np.logspace(-2, 2, 15)], description="Candidate Potts weights"
    )
    k: int = Field(4, ge=1, description="Neighbors for point graphs")
    prob_floor: float = Field(1e-9, gt=0)
    max_cycles: int = Field(50, ge=1)

    @field_validator("lambdas")
    @classmethod
    def _non_empty(cls, value: List[float]) -> List[float]:
        if not value or any(v < 0 for v in value):
            raise ValueError("lambda grid must be non-empty and non-negative")
        return value


FACADE_CLASSES = ("wall", "window", "balcony", "door", "roof", "sky", "shop")


class FacadeSpec(StrictModel):
    """Procedural facade layout"""

    seed: int = 0
    width: int = Field(48, ge=8)
    height: int = Field(64, ge=8)
    sky_height: int = Field(6, ge=0)
    roof_height: int = Field(6, ge=0)
    floors: int = Field(4, ge=1)
    window_cols: int = Field(3, ge=0)
    window_width: int = Field(6, ge=1)
    window_height: int = Field(7, ge=1)
    jitter: int = Field(1, ge=0, description="Max window offset in pixels")
    door_width: int = Field(6, ge=0)
    door_height: int = Field(9, ge=0)
    door_slot: Optional[int] = Field(None, description="Ground-floor door slot, middle if unset")
    balcony_rows: int = Field(1, ge=0, description="Floors above ground carrying balconies")
    balcony_height: int = Field(2, ge=1)
    classes: List[str] = Field(list(FACADE_CLASSES))
    noise_sigma: float = Field(18 / 255, ge=0)
    texture_amplitude: float = Field(10 / 255, ge=0)
    texture_period: float = Field(24.0, gt=0)
    pixel_size: float = Field(0.1, gt=0, description="Meters per pixel for clouds")
    depth_noise: float = Field(0.01, ge=0, description="Half-width of uniform cloud depth noise")
    cloud_clutter: float = Field(
        0.0, ge=0, lt=1, description="Share of facade points recolored as another class"
    )

    @field_validator("classes")
    @classmethod
    def _known_classes(cls, value: List[str]) -> List[str]:
        unknown = set(value) - set(FACADE_CLASSES)
        if unknown or "wall" not in value or len(set(value)) != len(value):
            raise ValueError("classes must be distinct facade classes including wall")
        return value


class RunConfig(StrictModel):
    """Fully resolved configuration of one CLI run"""

    command: str = ""
    mode: Literal["2d", "3d"] = "2d"
    manifest: Optional[str] = None
    model: Optional[str] = None
    inputs: List[str] = []
    output: Optional[str] = None
    palette: Optional[str] = None
    threads: int = Field(1, ge=1)
    seed: int = 0
    stack: StackConfig = StackConfig()
    features2d: FeatureConfig2D = FeatureConfig2D()
    features3d: FeatureConfig3D = FeatureConfig3D()
    crf: CRFConfig = CRFConfig()

    def flat_items(self) -> List[str]:
        """key=value lines, nested keys dotted, in declaration order"""
        lines: List[str] = []

        def walk(prefix: str, value: Any) -> None:
            if isinstance(value, dict):
                for key, item in value.items():
                    walk(f"{prefix}.{key}" if prefix else key, item)
            else:
                lines.append(f"{prefix}={json.dumps(value)}")

        walk("", self.model_dump())
        return lines


def parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def nest_items(items: Dict[str, Any]) -> Dict[str, Any]:
    """Turn dotted keys into nested dictionaries"""
    nested: Dict[str, Any] = {}
    for key, value in items.items():
        node = nested
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Config key {key} conflicts with {part}")
            node = child
        node[parts[-1]] = value
    return nested


def merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out


def build_run_config(*layers: Dict[str, Any]) -> RunConfig:
    """Merge flat dotted-key layers (later wins) into a validated RunConfig"""
    merged: Dict[str, Any] = {}
    for layer in layers:
        merged = merge(merged, nest_items(layer))
    try:
        return RunConfig(**merged)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def validated(model_cls, **values):
    """Construct a config model, mapping validation failures to ConfigError"""
    try:
        return model_cls(**values)
    except ValidationError as e:
        raise ConfigError(f"Invalid {model_cls.__name__}: {e}") from e


class StageReport(BaseModel):
    """Per-stage training outcome"""

    stage: int = Field(..., description="1-based stage index")
    held_out_accuracy: float = Field(..., description="Overall accuracy of cross predictions")
    autocontext_share: Optional[float] = Field(None, description="Context split share")
    rounds_used: int = Field(..., description="Boosting rounds of the full-data ensemble")
    empty_classes: List[int] = Field([], description="Classes without training mass")


class TrainingReport(BaseModel):
    """Outcome of cmd_train"""

    stages: List[StageReport]
    timings: Dict[str, float] = Field(..., description="Wall-clock seconds per phase")
    crf_lambda: Optional[float] = Field(None, description="Tuned Potts weight")
    feature_dim: int = Field(..., description="Data feature dimension")


class TTestResult(BaseModel):
    """One-tailed paired t-test"""

    t: float
    p: float
    dof: int
    significant: bool = Field(..., description="p < alpha")
