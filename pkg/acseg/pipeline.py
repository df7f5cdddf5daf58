"""
Dataset ingestion and orchestration: features, cascade training, Potts
weight tuning and inference with per-phase wall-clock accounting
"""

import concurrent.futures
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from acseg.core.errors import ConfigError, MissingPair
from acseg.core.io import read_image, read_label_raster, read_ply
from acseg.core.model_file import ModelFile
from acseg.core.types import ClassPalette, FeatureMatrix, PointCloud, ProbMap
from acseg.crf import EnergyModel, alpha_expansion, build_grid_graph, build_knn_graph, tune_lambda
from acseg.crf.graph import NeighborGraph
from acseg.features.features2d import (
    assemble_image_features,
    feature_fingerprint,
    load_extra_channels,
)
from acseg.features.features3d import (
    assemble_point_features,
    estimate_normals,
    fit_ground_and_facade,
)
from acseg.models import RunConfig, TrainingReport
from acseg.spatial_index import PointIndex
from acseg.stacking import StackItem, predict_stack, train_stack
from acseg.utils.cache_service import FeatureCache

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ManifestItem:
    stem: str
    input_path: str
    label_path: Optional[str] = None


@dataclass
class PreparedItem:
    """Data features of one input plus what context and CRF need"""

    stem: str
    features: FeatureMatrix
    labels: Optional[np.ndarray] = None
    image: Optional[np.ndarray] = None
    cloud: Optional[PointCloud] = None
    index: Optional[PointIndex] = None


@dataclass
class Prediction:
    stem: str
    stages: List[ProbMap]
    labels: np.ndarray
    energy_trace: List[float] = field(default_factory=list)


def load_manifest(path: str) -> List[ManifestItem]:
    """Lines of `input [labels]`, paths relative to the manifest"""
    if not os.path.exists(path):
        raise MissingPair(f"Manifest not found: {path}")
    root = os.path.dirname(os.path.abspath(path))
    items: List[ManifestItem] = []
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            if len(parts) > 2:
                raise ConfigError(f"{path}:{line_no}: expected `input [labels]`")
            input_path = os.path.join(root, parts[0])
            stem = os.path.splitext(os.path.basename(input_path))[0]
            if stem in seen:
                raise ConfigError(f"{path}:{line_no}: duplicate stem {stem}")
            seen.add(stem)
            label_path = os.path.join(root, parts[1]) if len(parts) == 2 else None
            if not os.path.exists(input_path):
                raise MissingPair(f"Input for {stem} not found: {input_path}")
            if label_path is not None and not os.path.exists(label_path):
                raise MissingPair(f"Labels for {stem} not found: {label_path}")
            items.append(ManifestItem(stem, input_path, label_path))
    logger.info(f"Manifest {path} lists {len(items)} items")
    return items


class SegmentationPipeline:
    """Feature extraction, training and inference for one run configuration"""

    def __init__(self, config: RunConfig, cache: Optional[FeatureCache] = None):
        self.config = config
        self.cache = cache or FeatureCache()
        self.timings: Dict[str, float] = {}
        self._timing_lock = threading.Lock()

    @property
    def fingerprint(self) -> str:
        if self.config.mode == "2d":
            return feature_fingerprint(self.config.features2d)
        return feature_fingerprint(self.config.features3d)

    def _time(self, phase: str, started: float) -> None:
        elapsed = time.perf_counter() - started
        with self._timing_lock:
            self.timings[phase] = self.timings.get(phase, 0.0) + elapsed

    def _add_timings(self, phases: Dict[str, float]) -> None:
        with self._timing_lock:
            for phase, seconds in phases.items():
                self.timings[phase] = self.timings.get(phase, 0.0) + seconds

    def _map(self, fn, items: Sequence):
        with concurrent.futures.ThreadPoolExecutor(max_workers=self.config.threads) as executor:
            return list(executor.map(fn, items))

    # ----- features -----

    def prepare_image(
        self, image: np.ndarray, stem: str, labels: Optional[np.ndarray] = None
    ) -> PreparedItem:
        cfg = self.config.features2d
        extra = load_extra_channels(cfg, stem) if cfg.extra_channels else None
        key = self.cache.feature_key(image, self.fingerprint, sorted(extra or {}))
        features = self.cache.get(key) if extra is None else None
        if features is None:
            features = assemble_image_features(image, cfg, extra)
            self.cache.set(key, features)
        return PreparedItem(stem, features, labels, image=image)

    def prepare_cloud(self, cloud: PointCloud, stem: str) -> PreparedItem:
        cfg = self.config.features3d
        index = PointIndex(cloud.points)
        key = self.cache.feature_key(
            np.concatenate([cloud.points, cloud.colors], axis=1), self.fingerprint
        )
        features = self.cache.get(key)
        if features is None:
            with_normals = estimate_normals(cloud, cfg.k, index)
            planes = fit_ground_and_facade(with_normals, cfg)
            features = assemble_point_features(with_normals, planes, cfg, index)
            self.cache.set(key, features)
        return PreparedItem(stem, features, cloud.labels, cloud=cloud, index=index)

    def _load(self, item: ManifestItem, palette: ClassPalette, need_labels: bool) -> PreparedItem:
        if need_labels and self.config.mode == "2d" and item.label_path is None:
            raise MissingPair(f"No label file listed for {item.stem}")
        if self.config.mode == "2d":
            image = read_image(item.input_path)
            labels = None
            if item.label_path is not None:
                grid = read_label_raster(item.label_path, palette)
                if (grid.height, grid.width) != image.shape[:2]:
                    raise MissingPair(f"Labels of {item.stem} differ in size from its image")
                grid.check_classes(palette.C)
                labels = grid.flat()
            return self.prepare_image(image, item.stem, labels)
        cloud = read_ply(item.input_path)
        if need_labels and cloud.labels is None:
            raise MissingPair(f"Cloud {item.stem} carries no labels")
        return self.prepare_cloud(cloud, item.stem)

    def load_items(
        self, items: Sequence[ManifestItem], palette: ClassPalette, need_labels: bool = True
    ) -> List[PreparedItem]:
        started = time.perf_counter()
        prepared = self._map(lambda item: self._load(item, palette, need_labels), items)
        self._time("features", started)
        logger.info(f"Extracted features for {len(prepared)} items")
        return prepared

    def graph_for(self, item: PreparedItem) -> NeighborGraph:
        if item.cloud is not None:
            return build_knn_graph(item.cloud, self.config.crf.k, item.index)
        height, width = item.image.shape[:2]
        return build_grid_graph(width, height)

    def _stack_item(self, item: PreparedItem, prior: Optional[ProbMap] = None) -> StackItem:
        return StackItem(item.stem, item.features, item.labels, item.image, prior)

    # ----- training -----

    def train(
        self,
        prepared: Sequence[PreparedItem],
        palette: ClassPalette,
        priors: Optional[Dict[str, ProbMap]] = None,
        tune_crf: bool = True,
    ) -> Tuple[ModelFile, TrainingReport]:
        """
        Train the cascade and tune the Potts weight

        Args:
            prepared: labeled items with data features
            palette: class palette
            priors: per-stem external probability maps consumed by every stage
            tune_crf: pick the Potts weight on the last stage's held-out predictions

        Returns:
            (model file contents, training report)
        """
        stack_items = [
            self._stack_item(item, priors.get(item.stem) if priors else None) for item in prepared
        ]
        if priors is not None:
            missing = [item.stem for item in prepared if item.stem not in priors]
            if missing:
                raise MissingPair(f"No prior for {', '.join(missing)}")
        result = train_stack(
            stack_items,
            palette.C,
            self.config.stack,
            mode=self.config.mode,
            threads=self.config.threads,
            feature_fingerprint=self.fingerprint,
        )
        self._add_timings(result.timings)

        crf_lambda = None
        if tune_crf:
            started = time.perf_counter()
            graphs = self._map(self.graph_for, prepared)
            crf_lambda, _ = tune_lambda(
                result.cross_predictions[-1],
                [item.labels for item in prepared],
                graphs,
                self.config.crf.lambdas,
            )
            self._time("crf", started)

        model = ModelFile(
            palette=palette,
            stack=result.model,
            config=self.config.model_dump(),
            crf_lambda=crf_lambda,
        )
        report = TrainingReport(
            stages=result.model.reports,
            timings=dict(self.timings),
            crf_lambda=crf_lambda,
            feature_dim=result.model.data_dim,
        )
        return model, report

    # ----- inference -----

    def resolve_lambda(self, model: ModelFile, crf: Optional[str]) -> Optional[float]:
        if crf is None:
            return None
        if crf == "auto":
            if model.crf_lambda is None:
                raise ConfigError("Model carries no tuned Potts weight; pass a number")
            return model.crf_lambda
        try:
            lam = float(crf)
        except ValueError as e:
            raise ConfigError(f"--crf expects a number or auto, got {crf}") from e
        if lam < 0 or not np.isfinite(lam):
            raise ConfigError("Potts weight must be finite and non-negative")
        return lam

    def smooth(
        self, p: ProbMap, graph: NeighborGraph, lam: float
    ) -> Tuple[np.ndarray, List[float]]:
        started = time.perf_counter()
        energy = EnergyModel.from_probmap(p, graph, lam, self.config.crf.prob_floor)
        labels, trace = alpha_expansion(energy, max_cycles=self.config.crf.max_cycles)
        self._time("crf", started)
        return labels, trace

    def predict(
        self,
        model: ModelFile,
        item: PreparedItem,
        stage: Optional[int] = None,
        lam: Optional[float] = None,
        prior: Optional[ProbMap] = None,
    ) -> Prediction:
        stack = model.stack
        stage = stage or len(stack.stages)
        if not 1 <= stage <= len(stack.stages):
            raise ConfigError(f"Stage {stage} outside 1..{len(stack.stages)}")
        phases: Dict[str, float] = {}
        outputs = predict_stack(stack, self._stack_item(item, prior), self.fingerprint, phases)
        self._add_timings(phases)
        chosen = outputs[stage - 1]
        if lam is None:
            return Prediction(item.stem, outputs, np.argmax(chosen.probs, axis=1))
        labels, trace = self.smooth(chosen, self.graph_for(item), lam)
        return Prediction(item.stem, outputs, labels, trace)

    def predict_all(
        self,
        model: ModelFile,
        prepared: Sequence[PreparedItem],
        stage: Optional[int] = None,
        lam: Optional[float] = None,
        priors: Optional[Dict[str, ProbMap]] = None,
    ) -> List[Prediction]:
        return self._map(
            lambda item: self.predict(
                model, item, stage, lam, priors.get(item.stem) if priors else None
            ),
            prepared,
        )
