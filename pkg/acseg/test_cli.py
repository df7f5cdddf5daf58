"""
End-to-end tests of the command line: synth, train, predict, eval, crf and fuse
"""

import os

import numpy as np
import pytest

from acseg.core.io import (
    load_probmap,
    read_label_raster,
    read_palette,
    read_ply,
    save_probmap,
)
from acseg.core.types import Grid, Points, ProbMap
from acseg.main import main

FAST_TRAIN = [
    "--stages",
    "2",
    "--folds",
    "2",
    "--set",
    "stack.gbdt.rounds=5",
    "--set",
    "stack.gbdt.shrinkage=0.5",
    "--set",
    "stack.pixel_subsample=0.2",
    "--set",
    "crf.lambdas=[0.0, 1.0]",
]


def _report(text):
    values = {}
    for line in text.splitlines():
        if "=" in line and not line.startswith(" "):
            key, value = line.split("=", 1)
            values[key] = value
    return values


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    corpus = str(root / "corpus")
    assert main(["synth", "--output", corpus, "--count", "4", "--seed", "3"]) == 0
    model = str(root / "model.bin")
    status = main(
        [
            "train",
            "--manifest",
            os.path.join(corpus, "manifest.txt"),
            "--palette",
            os.path.join(corpus, "palette.txt"),
            "--model",
            model,
            "--threads",
            "2",
            *FAST_TRAIN,
        ]
    )
    assert status == 0
    return root, corpus, model


def test_usage_errors_exit_with_one():
    assert main([]) == 1
    assert main(["train", "--no-such-flag"]) == 1
    assert main(["synth"]) == 1


def test_missing_inputs_exit_with_two(tmp_path):
    palette = tmp_path / "palette.txt"
    palette.write_text("0 1 2 3 wall\n")
    status = main(
        [
            "train",
            "--manifest",
            str(tmp_path / "absent.txt"),
            "--palette",
            str(palette),
            "--model",
            str(tmp_path / "m.bin"),
        ]
    )
    assert status == 2


def test_train_writes_model_and_report(trained):
    _, _, model = trained
    assert os.path.exists(model)
    with open(f"{model}.report.txt", encoding="utf-8") as f:
        report = _report(f.read())
    assert report["feature_dim"] == "125"
    assert report["crf_lambda"] in ("0", "1")
    assert 0.0 <= float(report["stage.2.autocontext_share"]) <= 1.0
    assert "config.stack.gbdt.rounds" in report


def test_predict_then_eval(trained, capsys):
    root, corpus, model = trained
    output = str(root / "predicted")
    status = main(
        [
            "predict",
            "--manifest",
            os.path.join(corpus, "manifest.txt"),
            "--model",
            model,
            "--output",
            output,
            "--crf",
            "auto",
        ]
    )
    assert status == 0
    assert len(os.listdir(output)) == 4
    timings = _report(capsys.readouterr().out)
    for phase in ("features", "autocontext", "stage1", "stage2", "crf"):
        assert float(timings[f"timing.{phase}"]) >= 0.0
    assert "timing.stages" not in timings

    status = main(
        [
            "eval",
            "--pred",
            output,
            "--gt",
            os.path.join(corpus, "labels"),
            "--palette",
            os.path.join(corpus, "palette.txt"),
        ]
    )
    assert status == 0
    report = _report(capsys.readouterr().out)
    assert 0.5 < float(report["overall"]) <= 1.0
    assert "class.wall.iou" in report


def test_zero_potts_weight_is_map(trained):
    root, corpus, model = trained
    output = str(root / "map")
    image = os.path.join(corpus, "images", "facade_0003.png")
    status = main(
        ["predict", image, "--model", model, "--output", output, "--crf", "0", "--dump-probs"]
    )
    assert status == 0
    palette = read_palette(os.path.join(corpus, "palette.txt"))
    labels = read_label_raster(os.path.join(output, "facade_0003.png"), palette).labels
    last = load_probmap(os.path.join(output, "facade_0003_st2.npz"))
    assert np.array_equal(labels.ravel(), np.argmax(last.probs, axis=1))


def test_earlier_stage_and_out_of_range(trained):
    root, corpus, model = trained
    image = os.path.join(corpus, "images", "facade_0003.png")
    output = str(root / "stage1")
    assert main(["predict", image, "--model", model, "--output", output, "--stage", "1"]) == 0
    status = main(["predict", image, "--model", model, "--output", output, "--stage", "3"])
    assert status == 1


def test_feature_config_mismatch_is_rejected(trained):
    root, corpus, model = trained
    image = os.path.join(corpus, "images", "facade_0003.png")
    status = main(
        [
            "predict",
            image,
            "--model",
            model,
            "--output",
            str(root / "mismatch"),
            "--set",
            "features2d.hog_bins=8",
        ]
    )
    assert status == 2


def test_eval_of_labels_against_themselves(trained, capsys):
    _, corpus, _ = trained
    labels = os.path.join(corpus, "labels")
    palette = os.path.join(corpus, "palette.txt")
    assert main(["eval", "--pred", labels, "--gt", labels, "--palette", palette]) == 0
    report = _report(capsys.readouterr().out)
    assert report["overall"] == "1.000000"


def test_crf_command_on_grid_map(tmp_path, capsys):
    rng = np.random.default_rng(0)
    probs = np.tile([0.7, 0.3], (64, 1))
    probs[rng.choice(64, 6, replace=False)] = [0.45, 0.55]
    path = str(tmp_path / "map.npz")
    save_probmap(path, ProbMap(probs, Grid(8, 8)))
    status = main(["crf", path, "--lambda", "1.0", "--output", str(tmp_path / "out")])
    assert status == 0
    labels = np.load(str(tmp_path / "out" / "map.npy"))
    assert (labels == 0).all()
    report = _report(capsys.readouterr().out)
    assert float(report["item.map.energy_final"]) <= float(report["item.map.energy_initial"])


def test_fuse_command(tmp_path):
    p2d = ProbMap(np.array([[1.0, 0.0]] * 4), Grid(2, 2))
    p3d = ProbMap(np.array([[0.2, 0.8]] * 3), Points(3))
    save_probmap(str(tmp_path / "p2d.npz"), p2d)
    save_probmap(str(tmp_path / "p3d.npz"), p3d)
    (tmp_path / "corr.txt").write_text("0 0 1\n1 2\n")
    out = str(tmp_path / "fused.npz")
    args = ["fuse", "--p2d", str(tmp_path / "p2d.npz"), "--p3d", str(tmp_path / "p3d.npz")]
    assert main(args + ["--output", out]) == 2
    status = main(
        args
        + [
            "--correspondences",
            str(tmp_path / "corr.txt"),
            "--output",
            out,
            "--back-project",
            str(tmp_path / "pixels.npy"),
        ]
    )
    assert status == 0
    fused = load_probmap(out)
    assert np.allclose(fused.probs[0], [0.6, 0.4])
    assert np.allclose(fused.probs[2], [0.2, 0.8])
    pixels = np.load(str(tmp_path / "pixels.npy"))
    assert pixels.tolist() == [0, 0, 0, -1]


def _split_corpus(corpus, train_count):
    with open(os.path.join(corpus, "manifest.txt"), encoding="utf-8") as f:
        lines = f.read().splitlines()
    with open(os.path.join(corpus, "train.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines[:train_count]) + "\n")
    with open(os.path.join(corpus, "test.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines[train_count:]) + "\n")
    return [os.path.splitext(os.path.basename(line.split()[0]))[0] for line in lines[train_count:]]


@pytest.mark.slow
def test_context_stages_and_smoothing_improve_accuracy(tmp_path, capsys):
    smoothing_wins = 0
    for seed in (1, 101, 201):
        corpus = str(tmp_path / f"corpus_{seed}")
        assert main(["synth", "--output", corpus, "--count", "50", "--seed", str(seed)]) == 0
        test_stems = _split_corpus(corpus, 40)
        palette_path = os.path.join(corpus, "palette.txt")
        model = str(tmp_path / f"model_{seed}.bin")
        status = main(
            [
                "train",
                "--manifest",
                os.path.join(corpus, "train.txt"),
                "--palette",
                palette_path,
                "--model",
                model,
                "--stages",
                "3",
                "--folds",
                "5",
                "--threads",
                "4",
                "--set",
                "stack.gbdt.rounds=30",
                "--set",
                "stack.gbdt.shrinkage=0.3",
                "--set",
                "stack.pixel_subsample=0.05",
                "--set",
                "crf.lambdas=[0.1, 0.3, 1.0, 3.0]",
            ]
        )
        assert status == 0
        with open(f"{model}.report.txt", encoding="utf-8") as f:
            report = _report(f.read())
        st1, st2, st3 = (float(report[f"stage.{k}.held_out_accuracy"]) for k in (1, 2, 3))
        assert st2 >= st1 + 0.01
        assert st3 >= st2 - 0.002
        capsys.readouterr()

        output = os.path.join(corpus, "predicted")
        status = main(
            [
                "predict",
                "--manifest",
                os.path.join(corpus, "test.txt"),
                "--model",
                model,
                "--output",
                output,
                "--crf",
                "auto",
                "--dump-probs",
            ]
        )
        assert status == 0
        predicted = _report(capsys.readouterr().out)
        palette = read_palette(palette_path)
        correct = {"st3": 0, "pw3": 0}
        for stem in test_stems:
            initial = float(predicted[f"item.{stem}.energy_initial"])
            assert float(predicted[f"item.{stem}.energy_final"]) < initial
            truth = read_label_raster(os.path.join(corpus, "labels", f"{stem}.png"), palette)
            truth = truth.flat()
            smoothed = read_label_raster(os.path.join(output, f"{stem}.png"), palette).flat()
            st3_map = load_probmap(os.path.join(output, f"{stem}_st3.npz"))
            valid = truth >= 0
            correct["st3"] += int((np.argmax(st3_map.probs, axis=1) == truth)[valid].sum())
            correct["pw3"] += int((smoothed == truth)[valid].sum())
        smoothing_wins += correct["pw3"] >= correct["st3"]
    assert smoothing_wins >= 2


@pytest.mark.slow
def test_thread_budget_does_not_change_predictions(tmp_path):
    corpus = str(tmp_path / "corpus")
    assert main(["synth", "--output", corpus, "--count", "4", "--seed", "7"]) == 0
    image = os.path.join(corpus, "images", "facade_0007.png")
    outputs = []
    for threads in ("1", "3"):
        model = str(tmp_path / f"model_{threads}.bin")
        train = [
            "train",
            "--manifest",
            os.path.join(corpus, "manifest.txt"),
            "--palette",
            os.path.join(corpus, "palette.txt"),
            "--model",
            model,
            "--threads",
            threads,
            "--no-crf",
            *FAST_TRAIN,
        ]
        assert main(train) == 0
        output = str(tmp_path / f"pred_{threads}")
        predict = ["predict", image, "--model", model, "--output", output, "--dump-probs"]
        assert main(predict + ["--threads", threads]) == 0
        outputs.append(load_probmap(os.path.join(output, "facade_0007_st2.npz")))
    assert np.array_equal(outputs[0].probs, outputs[1].probs)


@pytest.mark.slow
def test_point_cloud_path(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    spec = tmp_path / "cloud_spec.txt"
    spec.write_text("cloud_clutter = 0.3\ndepth_noise = 0.08\n")
    args = ["synth", "--output", str(corpus), "--count", "2", "--density", "150", "--seed", "5"]
    assert main(args + ["--spec", str(spec)]) == 0
    (corpus / "train.txt").write_text("clouds/facade_0005.ply\n")
    model = str(tmp_path / "cloud_model.bin")
    status = main(
        [
            "train",
            "--mode",
            "3d",
            "--manifest",
            str(corpus / "train.txt"),
            "--palette",
            str(corpus / "palette.txt"),
            "--model",
            model,
            "--stages",
            "2",
            "--folds",
            "1",
            "--set",
            "stack.gbdt.rounds=10",
            "--set",
            "stack.gbdt.shrinkage=0.2",
            "--set",
            "crf.lambdas=[0.0, 0.5]",
        ]
    )
    assert status == 0
    capsys.readouterr()

    target = str(corpus / "clouds" / "facade_0006.ply")
    output = str(tmp_path / "cloud_pred")
    status = main(
        ["predict", target, "--model", model, "--output", output, "--crf", "0.5", "--dump-probs"]
    )
    assert status == 0
    report = _report(capsys.readouterr().out)
    initial = float(report["item.facade_0006.energy_initial"])
    assert float(report["item.facade_0006.energy_final"]) <= initial

    truth = read_ply(target).labels
    valid = truth >= 0
    accuracy = []
    for k in (1, 2):
        p = load_probmap(os.path.join(output, f"facade_0006_st{k}.npz"))
        accuracy.append((np.argmax(p.probs, axis=1)[valid] == truth[valid]).mean())
    smoothed = read_ply(os.path.join(output, "facade_0006.ply")).labels
    assert accuracy[0] < 0.99
    assert accuracy[1] >= accuracy[0] + 0.005
    assert (smoothed[valid] == truth[valid]).mean() > 0.5
