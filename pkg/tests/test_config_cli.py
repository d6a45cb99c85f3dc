import csv
import hashlib
import json
import os
import shutil

import numpy as np
import pytest

from segdetect import datagen, pipeline, segnet
from segdetect.cli import main
from segdetect.config import ExperimentConfig, dump_config, load_config
from segdetect.errors import ConfigError, NumericError

from conftest import CONFIGS


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _tree_hash(path):
    h = hashlib.sha256()
    for base, dirs, files in sorted(os.walk(path)):
        dirs.sort()
        for name in sorted(files):
            full = os.path.join(base, name)
            h.update(os.path.relpath(full, path).encode())
            with open(full, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


# --- config ---------------------------------------------------------------

def test_config_roundtrip(tmp_path):
    cfg = load_config(os.path.join(CONFIGS, "smoke.json"))
    dump_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json").to_dict() == cfg.to_dict()
    assert ExperimentConfig.from_dict(ExperimentConfig().to_dict()).to_dict() == ExperimentConfig().to_dict()
    with open(os.path.join(CONFIGS, "default.json")) as fh:
        assert json.load(fh) == ExperimentConfig().to_dict()


@pytest.mark.parametrize("mutate", [
    lambda d: d.pop("schema_version"),
    lambda d: d.__setitem__("schema_version", 2),
    lambda d: d["cv"].__setitem__("folds", 1),
    lambda d: d["detectors"].__setitem__("Oracle", {}),
    lambda d: d["train"].__setitem__("learning_rate", -1),
    lambda d: d["attacks"]["suite"].append(d["attacks"]["suite"][0]),
    lambda d: d["attacks"]["suite"][0].__setitem__("epsilon", 0),
    lambda d: d["attacks"].__setitem__("untargeted_labels", "oracle"),
])
def test_invalid_configs_rejected(mutate):
    d = ExperimentConfig().to_dict()
    mutate(d)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(d)


def test_seed_override_replaces_every_seed():
    cfg = ExperimentConfig(detectors={"Heatmap": {"seed": 3}, "OCSVM": {}}).with_seed(99)
    d = cfg.to_dict()
    assert d["dataset"]["scene"]["seed"] == d["train"]["seed"] == d["cv"]["seed"] == 99
    assert d["attacks"]["seed"] == 99 and d["detectors"]["Heatmap"]["seed"] == 99


# --- CLI usage ------------------------------------------------------------

@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["generate", "--out", "x"],
    ["generate", "--config", "c", "--out", "x", "--seed-override", "-1"],
    ["generate", "--config", "c", "--out", "x", "--seed-override", str(2 ** 64)],
])
def test_usage_errors_exit_1(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1


def test_missing_config_exits_1(tmp_path):
    assert main(["generate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 1


def test_missing_dataset_exits_2(tmp_path):
    cfg = os.path.join(CONFIGS, "smoke.json")
    assert main(["train", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert main(["report", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_numeric_failure_exits_3(tmp_path, monkeypatch):
    def boom(cfg, root, force=False):
        raise NumericError("diverged")

    monkeypatch.setitem(pipeline.STAGES, "train", boom)
    assert main(["train", "--config", os.path.join(CONFIGS, "smoke.json"), "--out", str(tmp_path)]) == 3


def test_generate_refuses_overwrite_and_is_deterministic(tmp_path):
    cfg = os.path.join(CONFIGS, "smoke.json")
    assert main(["generate", "--config", cfg, "--out", str(tmp_path)]) == 0
    first = _tree_hash(tmp_path / "dataset")
    assert main(["generate", "--config", cfg, "--out", str(tmp_path)]) == 1
    assert main(["generate", "--config", cfg, "--out", str(tmp_path), "--force"]) == 0
    assert _tree_hash(tmp_path / "dataset") == first
    assert main(["generate", "--config", cfg, "--out", str(tmp_path), "--force",
                 "--seed-override", "5"]) == 0
    assert _tree_hash(tmp_path / "dataset") != first
    assert load_config(tmp_path / "dataset" / "config.json").scene.seed == 5


# --- stage outputs of one smoke run ---------------------------------------

def test_smoke_run_succeeds(smoke_run):
    assert smoke_run["codes"] == {verb: 0 for verb in pipeline.STAGES}


@pytest.mark.parametrize("stage", ["dataset", "model", "attacks", "detect", "report"])
def test_provenance_config_in_every_stage(smoke_run, stage):
    echoed = load_config(os.path.join(smoke_run["root"], stage, "config.json"))
    assert echoed.to_dict() == smoke_run["config"].to_dict()


def test_attack_catalogs_record_provenance(smoke_run):
    cfg = smoke_run["config"]
    for spec in list(cfg.attacks) + [cfg.fit_attack]:
        meta = datagen.read_manifest(os.path.join(smoke_run["root"], "attacks", spec.name))
        assert meta["provenance"]["spec"] == spec.to_dict()
        assert meta["provenance"]["group"] == spec.group


def test_checkpoint_and_training_curve(smoke_run):
    root = smoke_run["root"]
    model = pipeline.load_model(root)
    dataset, split = pipeline._load_split(root)
    curve = _rows(os.path.join(root, "model", "training_curve.csv"))
    best = max(float(r["val_miou"]) for r in curve)
    assert segnet.evaluate(model, [dataset[i] for i in split["val"]]) == pytest.approx(best, abs=1e-12)
    with open(os.path.join(root, "report", "report.txt")) as fh:
        assert f"best val mIoU {best:.4f}" in fh.read()


def test_apsr_of_clean_is_pixel_error(smoke_run):
    root = smoke_run["root"]
    model = pipeline.load_model(root)
    dataset, split = pipeline._load_split(root)
    preds = segnet.predict_labels(segnet.predict_batch(model, [dataset[i].image for i in split["test"]]))
    labels = np.stack([dataset[i].labels for i in split["test"]])
    rows = {r["attack"]: r for r in _rows(os.path.join(root, "attacks", "apsr.csv"))}
    assert float(rows["clean"]["apsr_mean"]) == pytest.approx(1 - np.mean(preds == labels), abs=1e-12)
    names = [s.name for s in smoke_run["config"].attacks] + [smoke_run["config"].fit_attack.name]
    assert list(rows) == ["clean"] + names


def test_grid_cardinality_and_grand_average(smoke_run):
    cfg = smoke_run["config"]
    rows = _rows(os.path.join(smoke_run["root"], "detect", "summary.csv"))
    cells = [r for r in rows if r["attack"] != "ALL"]
    assert len(cells) == len(cfg.attacks) * len(cfg.detectors)
    assert {(r["attack"], r["detector"]) for r in cells} == {
        (a.name, d) for a in cfg.attacks for d in cfg.detectors}
    grand = [r for r in rows if r["attack"] == "ALL"]
    assert len(grand) == 1
    assert float(grand[0]["ada_star_mean"]) == pytest.approx(
        np.mean([float(r["ada_star_mean"]) for r in cells]), abs=1e-12)
    folds = _rows(os.path.join(smoke_run["root"], "detect", "folds.csv"))
    assert list(folds[0]) == ["attack", "detector", "fold", "ada_star", "auroc", "tpr5"]
    assert len(folds) == len(cells) * cfg.cv_folds


def test_supervised_fits_only_read_the_fit_catalog(smoke_run):
    cfg = smoke_run["config"]
    log = _rows(os.path.join(smoke_run["root"], "detect", "access_log.csv"))
    for variant in ("CrossA", "Heatmap"):
        fits = {r["catalog"] for r in log if r["detector"] == variant and r["role"] == "fit"}
        assert fits == {"clean", cfg.fit_attack.name}
    for variant in ("Entropy", "OCSVM", "Ellipse"):
        fits = {r["catalog"] for r in log if r["detector"] == variant and r["role"] == "fit"}
        assert fits == {"clean"}


def test_saved_detectors_reproduce_scores(smoke_run):
    from segdetect.detectors import load_detector

    root = smoke_run["root"]
    clean = pipeline.read_catalog(root, "clean")
    for variant in smoke_run["config"].detectors:
        det = load_detector(os.path.join(root, "detect", "detectors", f"{variant}.json"))
        inputs = clean["heatmaps"] if variant == "Heatmap" else clean["features"]
        d = det.score(inputs)
        assert d.shape == (len(clean["sources"]),) and ((d >= 0) & (d <= 1)).all()


def test_report_groups_and_idempotence(smoke_run, tmp_path):
    root = smoke_run["root"]
    merged = _rows(os.path.join(root, "report", "merged.csv"))
    groups = {}
    for r in merged:
        groups.setdefault(r["attack"], set()).add(r["group"])
    assert all(len(g) == 1 for g in groups.values())
    assert set().union(*groups.values()) == set(pipeline.GROUPS)
    summary = {(r["attack"], r["detector"]): r for r in _rows(os.path.join(root, "detect", "summary.csv"))}
    for r in merged:
        assert r["ada_star_mean"] == summary[(r["attack"], r["detector"])]["ada_star_mean"]

    copy = tmp_path / "copy"
    shutil.copytree(root, copy)
    before = _tree_hash(copy / "report")
    assert main(["report", "--config", smoke_run["config_path"], "--out", str(copy)]) == 1
    assert main(["report", "--config", smoke_run["config_path"], "--out", str(copy), "--force"]) == 0
    assert _tree_hash(copy / "report") == before


def test_detect_without_fit_catalog_is_config_error(smoke_run, tmp_path):
    copy = tmp_path / "copy"
    shutil.copytree(smoke_run["root"], copy)
    shutil.rmtree(copy / "attacks" / smoke_run["config"].fit_attack.name)
    argv = ["detect", "--config", smoke_run["config_path"], "--out", str(copy), "--force"]
    assert main(argv) == 1
