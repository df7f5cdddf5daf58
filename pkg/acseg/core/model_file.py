"""
Binary model file: a JSON header followed by the little-endian tree arrays
of every fold and full-data ensemble

Layout:
    magic      8 bytes  b"ACSEGv01"
    u32        header length, then that many bytes of UTF-8 JSON
    u32        stage count
    per stage  u32 fold count, the fold ensembles, then the full ensemble
    ensemble   u32 C, u32 D, f64 shrinkage, u32 rounds, u32 n_empty,
               i32[n_empty] empty classes, u32 tree count, trees
    tree       u32 nodes, i32 class, i32 feature[nodes], f64 threshold[nodes],
               i32 left[nodes], i32 right[nodes], f64 value[nodes * C]
"""

import io
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, BinaryIO, Dict, List, Optional

import numpy as np

from acseg.core.errors import MissingPair, ModelFormatError
from acseg.core.types import ClassPalette, PaletteEntry
from acseg.gbdt import DecisionTree, TreeEnsemble
from acseg.models import StageReport
from acseg.stacking import StackModel, StageModel

logger = logging.getLogger(__name__)

MAGIC = b"ACSEGv01"


@dataclass
class ModelFile:
    palette: ClassPalette
    stack: StackModel
    config: Dict[str, Any] = field(default_factory=dict)
    crf_lambda: Optional[float] = None


class _Writer:
    def __init__(self, stream: BinaryIO):
        self.stream = stream

    def array(self, values, dtype: str) -> None:
        self.stream.write(np.asarray(values, dtype=dtype).tobytes())

    def u32(self, value: int) -> None:
        self.array([value], "<u4")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def array(self, count: int, dtype: str) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.offset + size > len(self.data):
            raise ModelFormatError("Model file is truncated")
        out = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.offset)
        self.offset += size
        return out.copy()

    def u32(self) -> int:
        return int(self.array(1, "<u4")[0])


def _write_ensemble(w: _Writer, model: TreeEnsemble) -> None:
    w.u32(model.C)
    w.u32(model.D)
    w.array([model.shrinkage], "<f8")
    w.u32(model.rounds_used)
    w.u32(len(model.empty_classes))
    w.array(model.empty_classes, "<i4")
    w.u32(len(model.trees))
    for tree in model.trees:
        w.u32(tree.n_nodes)
        w.array([tree.class_index], "<i4")
        w.array(tree.feature, "<i4")
        w.array(tree.threshold, "<f8")
        w.array(tree.left, "<i4")
        w.array(tree.right, "<i4")
        w.array(tree.value, "<f8")


def _read_ensemble(r: _Reader) -> TreeEnsemble:
    C, D = r.u32(), r.u32()
    shrinkage = float(r.array(1, "<f8")[0])
    rounds = r.u32()
    empty = [int(c) for c in r.array(r.u32(), "<i4")]
    trees: List[DecisionTree] = []
    for _ in range(r.u32()):
        nodes = r.u32()
        class_index = int(r.array(1, "<i4")[0])
        feature = r.array(nodes, "<i4").astype(np.int32)
        threshold = r.array(nodes, "<f8")
        left = r.array(nodes, "<i4").astype(np.int32)
        right = r.array(nodes, "<i4").astype(np.int32)
        value = r.array(nodes * C, "<f8").reshape(nodes, C)
        if feature.max(initial=-1) >= D:
            raise ModelFormatError("Tree splits on a feature beyond the model width")
        trees.append(DecisionTree(feature, threshold, left, right, value, class_index))
    return TreeEnsemble(trees, C, D, shrinkage, rounds, empty)


def _header(model: ModelFile) -> Dict[str, Any]:
    stack = model.stack
    return {
        "palette": [[e.index, list(e.rgb), e.name] for e in model.palette],
        "ignore_colors": [list(c) for c in model.palette.ignore_colors],
        "feature_fingerprint": stack.feature_fingerprint,
        "mode": stack.mode,
        "C": stack.C,
        "folds": stack.folds,
        "data_dim": stack.data_dim,
        "requires_prior": stack.requires_prior,
        "fold_train_ids": stack.fold_train_ids,
        "fold_fingerprints": [s.fold_fingerprints for s in stack.stages],
        "reports": [r.model_dump() for r in stack.reports],
        "crf_lambda": model.crf_lambda,
        "config": model.config,
    }


def save_model(path: str, model: ModelFile) -> None:
    buffer = io.BytesIO()
    w = _Writer(buffer)
    buffer.write(MAGIC)
    header = json.dumps(_header(model), sort_keys=True).encode("utf-8")
    w.u32(len(header))
    buffer.write(header)
    w.u32(len(model.stack.stages))
    for stage in model.stack.stages:
        w.u32(len(stage.fold_models))
        for ensemble in stage.fold_models:
            _write_ensemble(w, ensemble)
        _write_ensemble(w, stage.full_model)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as f:
        f.write(buffer.getvalue())
    logger.info(f"Saved {len(model.stack.stages)}-stage model to {path}")


def load_model(path: str) -> ModelFile:
    if not os.path.exists(path):
        raise MissingPair(f"Model file not found: {path}")
    with open(path, "rb") as f:
        data = f.read()
    if data[: len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"{path} is not an acseg model file")
    r = _Reader(data)
    r.offset = len(MAGIC)
    length = r.u32()
    try:
        header = json.loads(r.array(length, "u1").tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"{path}: corrupt header") from e

    stages: List[StageModel] = []
    fold_fingerprints = header.get("fold_fingerprints", [])
    for s in range(r.u32()):
        folds = [_read_ensemble(r) for _ in range(r.u32())]
        full = _read_ensemble(r)
        prints = fold_fingerprints[s] if s < len(fold_fingerprints) else []
        stages.append(StageModel(folds, full, prints))
    if r.offset != len(data):
        raise ModelFormatError(f"{path}: trailing bytes after the last stage")

    palette = ClassPalette(
        tuple(PaletteEntry(i, tuple(rgb), name) for i, rgb, name in header["palette"]),
        tuple(tuple(c) for c in header.get("ignore_colors", [])),
    )
    stack = StackModel(
        stages=stages,
        folds=header["folds"],
        C=header["C"],
        mode=header["mode"],
        data_dim=header["data_dim"],
        feature_fingerprint=header["feature_fingerprint"],
        requires_prior=header["requires_prior"],
        fold_train_ids=header["fold_train_ids"],
        reports=[StageReport(**report) for report in header["reports"]],
    )
    logger.info(f"Loaded {len(stages)}-stage model from {path}")
    return ModelFile(palette, stack, header.get("config", {}), header.get("crf_lambda"))
