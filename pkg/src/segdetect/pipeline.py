"""Pipeline stages behind the command-line verbs.

Every stage reads from and writes to one experiment root::

    root/dataset/   images, labels, manifest.json, split.json
    root/model/     checkpoint/, training_curve.csv
    root/attacks/   <catalog>/ per attack plus clean (dataset format), apsr.csv
    root/detect/    folds.csv, summary.csv, detectors/, access_log.csv
    root/report/    merged.csv, report.txt

and drops the effective config into its own directory.
"""
import csv
import json
import logging
import os
import shutil

import numpy as np

from . import datagen, segnet, sstn
from .attacks import SuiteContext, run_attack
from .config import dump_config
from .detectors import make_detector, save_detector
from .errors import ConfigError, FormatError
from .metrics import apsr, cross_validate_suite, write_fold_csv, write_summary_csv
from .uncertainty import entropy, feature_matrix, read_features_csv, write_features_csv

log = logging.getLogger(__name__)

CLEAN = "clean"
GROUPS = ("untargeted", "least-likely", "static-target", "class-deletion")


class OutputExistsError(ConfigError):
    pass


def _prepare(path, force):
    if os.path.isdir(path) and os.listdir(path):
        if not force:
            raise OutputExistsError(f"{path} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)
    return path


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise FormatError(f"missing input {path}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt JSON in {path}: {exc}") from exc


def _read_csv(path):
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except FileNotFoundError as exc:
        raise FormatError(f"missing input {path}") from exc


# ---------------------------------------------------------------------------
# generate / train
# ---------------------------------------------------------------------------

def generate(cfg, root, force=False):
    out = _prepare(os.path.join(root, "dataset"), force)
    dataset = datagen.generate_dataset(cfg.scene, cfg.count)
    datagen.save_dataset(out, dataset, cfg.scene)
    split = datagen.split_indices(cfg.count)
    _write_json(os.path.join(out, "split.json"), {k: v.tolist() for k, v in split.items()})
    dump_config(cfg, os.path.join(out, "config.json"))
    log.info("wrote %d images to %s", cfg.count, out)
    return out


def _load_split(root):
    path = os.path.join(root, "dataset")
    dataset = datagen.load_dataset(path)
    split = _read_json(os.path.join(path, "split.json"))
    return dataset, {k: [int(i) for i in v] for k, v in split.items()}


def train(cfg, root, force=False):
    dataset, split = _load_split(root)
    out = _prepare(os.path.join(root, "model"), force)
    model, history = segnet.train([dataset[i] for i in split["train"]], cfg.train,
                                  [dataset[i] for i in split["val"]], widths=cfg.widths,
                                  num_classes=cfg.scene.num_classes)
    segnet.save_checkpoint(os.path.join(out, "checkpoint"), model)
    with open(os.path.join(out, "training_curve.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "val_miou"])
        for r in history:
            w.writerow([r["epoch"], repr(r["train_loss"]), repr(r["val_loss"]), repr(r["val_miou"])])
    dump_config(cfg, os.path.join(out, "config.json"))
    return model, history


def load_model(root):
    return segnet.load_checkpoint(os.path.join(root, "model", "checkpoint"))


# ---------------------------------------------------------------------------
# attack
# ---------------------------------------------------------------------------

def _write_catalog(path, name, images, labels, sources, model, meta, linf=None):
    """Dataset-format directory plus provenance, entropy heatmaps and features."""
    images = np.stack(images)
    items = [datagen.LabeledImage(x, y) for x, y in zip(images, labels)]
    provenance = {"attack": name, "sources": [int(s) for s in sources],
                  "linf": [float(v) for v in (linf if linf is not None else np.zeros(len(items)))],
                  **meta}
    datagen.save_dataset(path, items, extra={"provenance": provenance})
    probs = segnet.predict_batch(model, list(images))
    sstn.save(os.path.join(path, "entropy.sstn"), entropy(probs))
    write_features_csv(os.path.join(path, "features.csv"), sources, name, feature_matrix(probs))
    return segnet.predict_labels(probs)


def attack(cfg, root, force=False):
    dataset, split = _load_split(root)
    model = load_model(root)
    out = _prepare(os.path.join(root, "attacks"), force)
    test_ids = split["test"][:cfg.test_limit] if cfg.test_limit else split["test"]
    images = [dataset[i].image for i in test_ids]
    labels = [dataset[i].labels for i in test_ids]
    train_ids = split["train"]
    ctx = SuiteContext(
        static_mask=dataset[train_ids[cfg.static_source]].labels,
        delete_class=cfg.delete_class,
        universal_images=[dataset[i].image for i in train_ids[:cfg.universal_images]],
        universal_batch_size=cfg.universal_batch_size,
        untargeted_labels=cfg.untargeted_labels,
        seed=cfg.attack_seed,
    )
    rows = []
    preds = _write_catalog(os.path.join(out, CLEAN), CLEAN, images, labels, test_ids, model,
                           {"group": "benign", "spec": None})
    rows.append(_apsr_row(CLEAN, "benign", 0.0, preds, labels, 0.0))
    for spec in list(cfg.attacks) + [cfg.fit_attack]:
        log.info("attack %s on %d images", spec.name, len(images))
        examples, extras = run_attack(model, spec, images, labels, ctx, indices=test_ids)
        path = os.path.join(out, spec.name)
        preds = _write_catalog(path, spec.name, [e.image for e in examples], labels,
                               [e.source_index for e in examples], model,
                               {"group": spec.group, "spec": spec.to_dict()},
                               [e.linf for e in examples])
        if "noise" in extras:
            sstn.save(os.path.join(path, "noise.sstn"), extras["noise"])
        linf = max(e.linf for e in examples)
        rows.append(_apsr_row(spec.name, spec.group, spec.epsilon, preds, labels, linf))
    with open(os.path.join(out, "apsr.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["attack", "group", "epsilon", "images", "apsr_mean", "apsr_std", "linf_max"])
        w.writerows(rows)
    dump_config(cfg, os.path.join(out, "config.json"))
    return rows


def _apsr_row(name, group, eps, preds, labels, linf):
    per = np.array([apsr(p, y) for p, y in zip(preds, labels)])
    return [name, group, repr(float(eps)), len(per), repr(float(per.mean())),
            repr(float(per.std())), repr(float(linf))]


# ---------------------------------------------------------------------------
# detect
# ---------------------------------------------------------------------------

class AccessLog:
    """Records which catalog each detector fit or scoring pass consumed."""

    def __init__(self):
        self.rows = []

    def record(self, detector, role, catalog):
        self.rows.append((detector, role, catalog))

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["detector", "role", "catalog"])
            w.writerows(self.rows)


def read_catalog(root, name):
    path = os.path.join(root, "attacks", name)
    if not os.path.isdir(path):
        raise FormatError(f"missing attack catalog {path}")
    meta = datagen.read_manifest(path).get("provenance", {})
    ids, _, feats = read_features_csv(os.path.join(path, "features.csv"))
    maps = sstn.load(os.path.join(path, "entropy.sstn"))
    if len(ids) != len(maps) or ids.tolist() != meta.get("sources"):
        raise FormatError(f"{path}: features, heatmaps and catalog index disagree")
    return {"sources": ids, "features": feats, "heatmaps": maps}


def detect(cfg, root, force=False):
    roster = list(cfg.detectors)
    supervised = [v for v in roster if make_detector(v, **cfg.detectors[v]).supervised]
    fit_name = cfg.fit_attack.name
    if supervised and not os.path.isdir(os.path.join(root, "attacks", fit_name)):
        raise ConfigError(f"supervised detectors {supervised} need the {fit_name} catalog; "
                          "run the attack stage with it first")
    clean = read_catalog(root, CLEAN)
    suite = {spec.name: read_catalog(root, spec.name) for spec in cfg.attacks}
    fit = read_catalog(root, fit_name) if supervised else None
    # benign source ids -> positions in the clean catalog
    position = {int(s): i for i, s in enumerate(clean["sources"])}

    def positions(cat):
        try:
            return np.array([position[int(s)] for s in cat["sources"]], dtype=np.int64)
        except KeyError as exc:
            raise FormatError(f"adversarial source {exc} has no clean counterpart") from exc

    out = _prepare(os.path.join(root, "detect"), force)
    os.makedirs(os.path.join(out, "detectors"))
    access = AccessLog()
    rows = []
    for variant in roster:
        params = cfg.detectors[variant]
        probe = make_detector(variant, **params)
        key = "heatmaps" if probe.input_kind == "heatmap" else "features"
        fit_adv = fit[key] if probe.supervised else None
        fit_src = positions(fit) if probe.supervised else None
        access.record(variant, "fit", CLEAN)
        if probe.supervised:
            access.record(variant, "fit", fit_name)
        for name in suite:
            access.record(variant, "score", name)
        log.info("cross-validating %s", variant)
        results = cross_validate_suite(
            lambda: make_detector(variant, **params), clean[key],
            {name: cat[key] for name, cat in suite.items()}, k=cfg.cv_folds, seed=cfg.fold_seed,
            sources={name: positions(cat) for name, cat in suite.items()},
            fit_adversarial=fit_adv, fit_adversarial_source=fit_src)
        rows.extend((name, variant, results[name]) for name in suite)
        final = make_detector(variant, **params).fit(clean[key], fit_adv)
        save_detector(os.path.join(out, "detectors", f"{variant}.json"), final)
    # attack-major order regardless of roster order
    order = {name: i for i, name in enumerate(suite)}
    rows.sort(key=lambda r: order[r[0]])
    write_fold_csv(os.path.join(out, "folds.csv"), rows)
    write_summary_csv(os.path.join(out, "summary.csv"), rows)
    access.write(os.path.join(out, "access_log.csv"))
    dump_config(cfg, os.path.join(out, "config.json"))
    return rows


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def report(cfg, root, force=False):
    apsr_rows = {r["attack"]: r for r in _read_csv(os.path.join(root, "attacks", "apsr.csv"))}
    summary = _read_csv(os.path.join(root, "detect", "summary.csv"))
    curve = _read_csv(os.path.join(root, "model", "training_curve.csv"))
    out = _prepare(os.path.join(root, "report"), force)

    cells = [r for r in summary if r["attack"] != "ALL"]
    grand = next((r for r in summary if r["attack"] == "ALL"), None)
    if grand is None:
        raise FormatError("summary.csv lacks the grand-average row")
    detectors = list(dict.fromkeys(r["detector"] for r in cells))
    attacks = list(dict.fromkeys(r["attack"] for r in cells))
    for name in attacks:
        if name not in apsr_rows:
            raise FormatError(f"attack {name} has detection results but no APSR row")
    by_cell = {(r["attack"], r["detector"]): r for r in cells}

    merged_cols = ["ada_star_mean", "ada_star_std", "auroc_mean", "auroc_std", "tpr5_mean", "tpr5_std"]
    with open(os.path.join(out, "merged.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "attack", "epsilon", "apsr_mean", "detector"] + merged_cols)
        for group in GROUPS:
            for name in attacks:
                a = apsr_rows[name]
                if a["group"] != group:
                    continue
                for det in detectors:
                    c = by_cell[(name, det)]
                    w.writerow([group, name, a["epsilon"], a["apsr_mean"], det] + [c[k] for k in merged_cols])

    best = max(curve, key=lambda r: float(r["val_miou"])) if curve else None
    lines = []
    if best is not None:
        lines.append(f"segmentation model: best val mIoU {float(best['val_miou']):.4f} "
                     f"(epoch {best['epoch']})")
    clean = apsr_rows.get(CLEAN)
    if clean is not None:
        lines.append(f"clean APSR {float(clean['apsr_mean']):.4f}")
    lines.append("")
    header = f"{'attack':<14}{'eps':>5}{'APSR':>8}" + "".join(f"{d:>17}" for d in detectors)
    for group in GROUPS:
        members = [n for n in attacks if apsr_rows[n]["group"] == group]
        if not members:
            continue
        lines.append(f"[{group}]  ADA* mean+-std / AuROC")
        lines.append(header)
        for name in members:
            a = apsr_rows[name]
            cellstr = ""
            for det in detectors:
                c = by_cell[(name, det)]
                cellstr += (f"{float(c['ada_star_mean']):>7.3f}+-{float(c['ada_star_std']):<5.3f}"
                            f"{float(c['auroc_mean']):>5.2f}")
            lines.append(f"{name:<14}{float(a['epsilon']):>5.0f}{float(a['apsr_mean']):>8.3f}{cellstr}")
        lines.append("")
    lines.append(f"grand average ADA*: {float(grand['ada_star_mean']):.4f}")
    text = "\n".join(lines) + "\n"
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(text)
    dump_config(cfg, os.path.join(out, "config.json"))
    return text


STAGES = {"generate": generate, "train": train, "attack": attack, "detect": detect, "report": report}
