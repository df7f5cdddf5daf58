"""
Auto-context facade segmentation - command line entry point
Subcommands: train, predict, eval, crf, fuse, synth
"""

import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from acseg.config import settings
from acseg.core.errors import ConfigError, MissingPair, SegmentationError, ShapeMismatch
from acseg.core.io import (
    load_probmap,
    read_correspondences,
    read_kv_file,
    read_palette,
    read_ply,
    render_labels,
    save_probmap,
    write_image,
    write_ply,
)
from acseg.core.model_file import load_model, save_model
from acseg.core.types import Grid, LabelGrid, Points, ProbMap
from acseg.crf import EnergyModel, alpha_expansion, build_grid_graph, build_knn_graph
from acseg.eval import (
    evaluate_run,
    fuse_modalities,
    invert_membership,
    project_majority,
    project_probabilities,
)
from acseg.models import FacadeSpec, RunConfig, build_run_config, parse_value, validated
from acseg.pipeline import ManifestItem, SegmentationPipeline, load_manifest
from acseg.synth.facade import write_corpus
from acseg.utils.cache_service import FeatureCache

logger = logging.getLogger(__name__)

SEED_KEYS = ("seed", "stack.seed", "stack.gbdt.seed", "features3d.seed")


class CommandParser(argparse.ArgumentParser):
    """Usage errors become ConfigError so they exit with status 1"""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise ConfigError(message)


def build_parser() -> CommandParser:
    parser = CommandParser(prog="acseg", description="Auto-context facade segmentation")
    sub = parser.add_subparsers(dest="command", parser_class=CommandParser)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="key = value run configuration file")
        p.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE", help="Override a key"
        )
        p.add_argument("--threads", type=int, help="Worker threads")
        p.add_argument("--seed", type=int, help="Seed for folds, boosting and RANSAC")
        p.add_argument("--log-level", help="Logging level")

    train = sub.add_parser("train", help="Train a cascade from a manifest")
    common(train)
    train.add_argument("--manifest", help="Lines of `input labels`")
    train.add_argument("--palette", help="Class palette file")
    train.add_argument("--model", help="Output model file")
    train.add_argument("--mode", choices=["2d", "3d"])
    train.add_argument("--stages", type=int)
    train.add_argument("--folds", type=int)
    train.add_argument("--prior-dir", help="Per-stem .npz probability maps fed to stage 1")
    train.add_argument("--no-crf", action="store_true", help="Skip Potts weight tuning")
    train.add_argument("--cache-dir", help="Directory caching extracted features")

    predict = sub.add_parser("predict", help="Label images or clouds with a trained model")
    common(predict)
    predict.add_argument("inputs", nargs="*", help="Images or PLY clouds")
    predict.add_argument("--manifest", help="Alternative to positional inputs")
    predict.add_argument("--model", help="Model file")
    predict.add_argument("--output", help="Output directory")
    predict.add_argument("--stage", type=int, help="1-based stage to output, last by default")
    predict.add_argument("--crf", help="Potts weight or `auto` for the tuned one")
    predict.add_argument("--dump-probs", action="store_true", help="Write every stage's map")
    predict.add_argument("--prior-dir", help="Per-stem .npz priors for fused models")

    evaluate = sub.add_parser("eval", help="Score predictions against ground truth")
    common(evaluate)
    evaluate.add_argument("--pred", required=True, help="Prediction directory")
    evaluate.add_argument("--gt", required=True, help="Ground truth directory")
    evaluate.add_argument("--palette", help="Class palette file")
    evaluate.add_argument("--compare", help="Baseline prediction directory for a t-test")

    crf = sub.add_parser("crf", help="Potts smoothing of stored probability maps")
    common(crf)
    crf.add_argument("probs", nargs="+", help="Probability map .npz files")
    crf.add_argument("--lambda", dest="lam", type=float, required=True)
    crf.add_argument("--cloud", action="append", default=[], help="PLY per point map")
    crf.add_argument("--palette", help="Palette for rendering grid labels")
    crf.add_argument("--output", help="Output directory")

    fuse = sub.add_parser("fuse", help="Fuse image and point probabilities")
    common(fuse)
    fuse.add_argument("--p2d", required=True, help="Image-side .npz map")
    fuse.add_argument("--p3d", required=True, help="Point .npz map")
    fuse.add_argument("--correspondences", help="Lines of `point pixel pixel ...`")
    fuse.add_argument("--fusion", choices=["mean", "product"], default="mean")
    fuse.add_argument("--output", required=True, help="Fused .npz map")
    fuse.add_argument("--back-project", help="Write 3D MAP labels projected onto pixels here")

    synth = sub.add_parser("synth", help="Write a synthetic facade corpus")
    common(synth)
    synth.add_argument("--output", required=True, help="Corpus directory")
    synth.add_argument("--count", type=int, default=1)
    synth.add_argument("--density", type=float, help="Points per square meter for clouds")
    synth.add_argument("--spec", help="key = value facade spec file")
    return parser


def _flag_layer(args: argparse.Namespace) -> Dict[str, Any]:
    layer: Dict[str, Any] = {}
    for flag, key in (
        ("manifest", "manifest"),
        ("model", "model"),
        ("output", "output"),
        ("palette", "palette"),
        ("mode", "mode"),
        ("threads", "threads"),
        ("stages", "stack.stages"),
        ("folds", "stack.folds"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            layer[key] = value
    if getattr(args, "inputs", None):
        layer["inputs"] = list(args.inputs)
    if args.seed is not None:
        layer.update({key: args.seed for key in SEED_KEYS})
    return layer


def _set_layer(pairs: Sequence[str]) -> Dict[str, Any]:
    layer: Dict[str, Any] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair}")
        key, value = (part.strip() for part in pair.split("=", 1))
        layer[key] = parse_value(value)
    return layer


def resolve_config(
    args: argparse.Namespace, model_layer: Optional[Dict[str, Any]] = None
) -> RunConfig:
    """Defaults < settings < stored model config < config file < --set < flags"""
    base = {"threads": settings.THREADS, "model": settings.MODEL_PATH}
    base.update({key: settings.SEED for key in SEED_KEYS})
    layers = [base, model_layer or {}]
    if args.config:
        layers.append(read_kv_file(args.config))
    layers += [_set_layer(args.set), _flag_layer(args), {"command": args.command}]
    return build_run_config(*layers)


def _require(value: Optional[str], what: str) -> str:
    if not value:
        raise ConfigError(f"Missing {what}")
    return value


def _emit(lines: List[str], path: Optional[str] = None) -> None:
    text = "\n".join(lines)
    print(text)
    if path:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(text + "\n")


def _config_lines(config: RunConfig) -> List[str]:
    return [f"config.{line}" for line in config.flat_items()]


def _timing_lines(timings: Dict[str, float]) -> List[str]:
    lines = [f"timing.{phase}={seconds:.3f}" for phase, seconds in sorted(timings.items())]
    if timings:
        frame = pd.DataFrame({"seconds": timings}).sort_index()
        lines += ["", frame.to_string(float_format=lambda v: f"{v:.3f}")]
    return lines


def _load_priors(directory: Optional[str], stems: Sequence[str]) -> Optional[Dict[str, ProbMap]]:
    if not directory:
        return None
    priors = {}
    for stem in stems:
        path = os.path.join(directory, f"{stem}.npz")
        if not os.path.exists(path):
            raise MissingPair(f"No prior for {stem} in {directory}")
        priors[stem] = load_probmap(path)
    return priors


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    palette = read_palette(_require(config.palette, "--palette"))
    model_path = _require(config.model, "--model")
    pipeline = SegmentationPipeline(config, FeatureCache(args.cache_dir))
    manifest = load_manifest(_require(config.manifest, "--manifest"))
    prepared = pipeline.load_items(manifest, palette, need_labels=True)
    priors = _load_priors(args.prior_dir, [item.stem for item in manifest])
    model, report = pipeline.train(prepared, palette, priors, tune_crf=not args.no_crf)
    save_model(model_path, model)

    lines = _config_lines(config)
    for stage in report.stages:
        prefix = f"stage.{stage.stage}"
        lines.append(f"{prefix}.held_out_accuracy={stage.held_out_accuracy:.6f}")
        if stage.autocontext_share is not None:
            lines.append(f"{prefix}.autocontext_share={stage.autocontext_share:.6f}")
        lines.append(f"{prefix}.rounds_used={stage.rounds_used}")
        if stage.empty_classes:
            lines.append(f"{prefix}.empty_classes={stage.empty_classes}")
    lines.append(f"feature_dim={report.feature_dim}")
    if report.crf_lambda is not None:
        lines.append(f"crf_lambda={report.crf_lambda:g}")
    lines += _timing_lines(report.timings)
    _emit(lines, f"{model_path}.report.txt")
    return 0


def _predict_items(config: RunConfig) -> List[ManifestItem]:
    if config.manifest:
        return load_manifest(config.manifest)
    if not config.inputs:
        raise ConfigError("Give inputs or --manifest")
    items = []
    for path in config.inputs:
        if not os.path.exists(path):
            raise MissingPair(f"Input not found: {path}")
        items.append(ManifestItem(os.path.splitext(os.path.basename(path))[0], path))
    return items


def cmd_predict(args: argparse.Namespace) -> int:
    first = resolve_config(args)
    model = load_model(_require(first.model, "--model"))
    stored = {
        key: model.config[key]
        for key in ("mode", "features2d", "features3d", "crf")
        if key in model.config
    }
    config = resolve_config(args, stored)
    output = _require(config.output, "--output")
    pipeline = SegmentationPipeline(config)
    lam = pipeline.resolve_lambda(model, args.crf)
    items = _predict_items(config)
    prepared = pipeline.load_items(items, model.palette, need_labels=False)
    priors = _load_priors(args.prior_dir, [item.stem for item in items])
    predictions = pipeline.predict_all(model, prepared, args.stage, lam, priors)

    os.makedirs(output, exist_ok=True)
    lines = _config_lines(config)
    for item, prediction in zip(prepared, predictions):
        if item.cloud is not None:
            labeled = item.cloud.with_labels(prediction.labels)
            write_ply(os.path.join(output, f"{item.stem}.ply"), labeled)
        else:
            height, width = item.image.shape[:2]
            grid = LabelGrid(prediction.labels.reshape(height, width))
            raster = render_labels(grid, model.palette)
            write_image(os.path.join(output, f"{item.stem}.png"), raster)
        if args.dump_probs:
            for k, p in enumerate(prediction.stages, 1):
                save_probmap(os.path.join(output, f"{item.stem}_st{k}.npz"), p)
        if prediction.energy_trace:
            lines.append(f"item.{item.stem}.energy_initial={prediction.energy_trace[0]:.6f}")
            lines.append(f"item.{item.stem}.energy_final={prediction.energy_trace[-1]:.6f}")
    if lam is not None:
        lines.append(f"crf_lambda={lam:g}")
    lines += _timing_lines(pipeline.timings)
    _emit(lines)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    palette = read_palette(_require(config.palette, "--palette"))
    report = evaluate_run(args.pred, args.gt, palette, args.compare, config.threads)
    _emit(_config_lines(config) + report.lines() + ["", report.table()])
    return 0


def cmd_crf(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    output = _require(config.output, "--output")
    palette = read_palette(config.palette) if config.palette else None
    clouds = list(args.cloud)
    lines = _config_lines(config)
    os.makedirs(output, exist_ok=True)
    for path in args.probs:
        p = load_probmap(path)
        stem = os.path.splitext(os.path.basename(path))[0]
        if isinstance(p.geometry, Grid):
            graph = build_grid_graph(p.geometry.width, p.geometry.height)
            cloud = None
        else:
            if not clouds:
                raise ConfigError(f"{path} is a point map; pass its cloud with --cloud")
            cloud = read_ply(clouds.pop(0))
            if cloud.n != p.element_count:
                raise ShapeMismatch(f"{path} has {p.element_count} points, cloud has {cloud.n}")
            graph = build_knn_graph(cloud, config.crf.k)
        energy = EnergyModel.from_probmap(p, graph, args.lam, config.crf.prob_floor)
        labels, trace = alpha_expansion(energy, max_cycles=config.crf.max_cycles)
        if cloud is not None:
            write_ply(os.path.join(output, f"{stem}.ply"), cloud.with_labels(labels))
        elif palette is not None:
            grid = LabelGrid(labels.reshape(p.geometry.height, p.geometry.width))
            write_image(os.path.join(output, f"{stem}.png"), render_labels(grid, palette))
        else:
            np.save(os.path.join(output, f"{stem}.npy"), labels)
        lines += [
            f"item.{stem}.energy_initial={trace[0]:.6f}",
            f"item.{stem}.energy_final={trace[-1]:.6f}",
        ]
    _emit(lines)
    return 0


def cmd_fuse(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    p2d = load_probmap(args.p2d)
    p3d = load_probmap(args.p3d)
    if args.back_project and not args.correspondences:
        raise ConfigError("--back-project needs --correspondences")
    coverage = None
    membership: List[List[int]] = []
    if args.correspondences:
        membership = read_correspondences(args.correspondences)
        if len(membership) > p3d.element_count:
            raise ShapeMismatch("Correspondences reference more points than the 3D map has")
        membership += [[] for _ in range(p3d.element_count - len(membership))]
        probs, coverage = project_probabilities(p2d, membership)
        p2d = ProbMap.normalized(probs, Points(p3d.element_count))
    fused = fuse_modalities(p2d, p3d, coverage, args.fusion)
    save_probmap(args.output, fused)
    lines = _config_lines(config) + [f"fused_elements={fused.element_count}"]

    if args.back_project:
        source = load_probmap(args.p2d)
        pixels = invert_membership(membership, source.element_count)
        labels = project_majority(np.argmax(fused.probs, axis=1), pixels)
        np.save(args.back_project, labels)
        lines.append(f"back_projected_unlabeled={int((labels < 0).sum())}")
    _emit(lines)
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    values: Dict[str, Any] = read_kv_file(args.spec) if args.spec else {}
    if args.seed is not None:
        values["seed"] = args.seed
    spec = validated(FacadeSpec, **values)
    stems = write_corpus(args.output, spec, args.count, args.density)
    lines = _config_lines(config) + [f"items={len(stems)}", f"output={args.output}"]
    _emit(lines)
    return 0


COMMANDS = {
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "crf": cmd_crf,
    "fuse": cmd_fuse,
    "synth": cmd_synth,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the process exit status"""
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise ConfigError("No subcommand given")
        level = (args.log_level or settings.LOG_LEVEL).upper()
        logging.basicConfig(level=getattr(logging, level, logging.INFO), format=settings.LOG_FORMAT)
        return COMMANDS[args.command](args)
    except SegmentationError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        return 3


if __name__ == "__main__":
    exit(main())
