"""Acceptance criteria 1-11, one test each.

Every test records a pass/fail line in ``conftest.ACCEPTANCE``; the lines are
printed in the terminal summary of the run.
"""
import csv
import filecmp
import os
import time

import numpy as np
import pytest

from segdetect import attacks, datagen, pipeline, segnet
from segdetect import metrics as M
from segdetect import uncertainty as U
from segdetect.attacks import AttackConfig, SuiteContext
from segdetect.detectors import OCSVMDetector
from segdetect.tensor import Tensor, add, backward, mul, softmax_cross_entropy

from conftest import ACCEPTANCE, CONFIGS
from test_metrics import brute_ada_star, trapezoid_auroc


def record(number, ok, detail):
    ACCEPTANCE[number] = (bool(ok), detail)
    assert ok, f"criterion {number}: {detail}"


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# 1. gradient correctness
# ---------------------------------------------------------------------------

def test_criterion_01_gradient_check():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    model = segnet.init_model(5, 3, (16, 32, 32), seed=1)
    model.weights = [(w, rng.normal(0, 0.1, size=b.shape)) for w, b in model.weights]
    model.input_mean = np.array([0.4, 0.5, 0.6])
    model.input_std = np.array([0.2, 0.25, 0.3])
    x = rng.random((16, 16, 3))
    y = rng.integers(0, 5, size=(16, 16))

    def loss_of(image, weights):
        xn = mul(add(Tensor(image), -model.input_mean), 1.0 / model.input_std)
        params = [(Tensor(w), Tensor(b)) for w, b in weights]
        return softmax_cross_entropy(segnet.forward_params(params, xn), y).item()

    xt = Tensor(x, requires_grad=True)
    params = model.parameters(trainable=True)
    xn = mul(add(xt, -model.input_mean), 1.0 / model.input_std)
    grads = backward(softmax_cross_entropy(segnet.forward_params(params, xn), y))

    h = 1e-5
    checks = []  # (analytic, numeric)
    for flat in rng.choice(x.size, 50, replace=False):
        idx = np.unravel_index(flat, x.shape)
        plus, minus = x.copy(), x.copy()
        plus[idx] += h
        minus[idx] -= h
        num = (loss_of(plus, model.weights) - loss_of(minus, model.weights)) / (2 * h)
        checks.append((grads[xt][idx], num))
    for layer, (wt, bt) in enumerate(params):
        for which, tensor, count in ((0, wt, 15), (1, bt, 5)):
            arr = model.weights[layer][which]
            for flat in rng.choice(arr.size, count, replace=False):
                idx = np.unravel_index(flat, arr.shape)
                vals = []
                for sign in (1, -1):
                    pert = [(w.copy(), b.copy()) for w, b in model.weights]
                    pert[layer][which][idx] += sign * h
                    vals.append(loss_of(x, pert))
                checks.append((grads[tensor][idx], (vals[0] - vals[1]) / (2 * h)))
    a, n = np.array(checks).T
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    elapsed = time.perf_counter() - t0
    record(1, len(checks) >= 100 and rel.max() <= 1e-4 and elapsed < 60,
           f"{len(checks)} coordinates, max rel err {rel.max():.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# frozen checkpoint from the default pipeline
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def frozen(default_run):
    root = default_run["root"]
    dataset, split = pipeline._load_split(root)
    return {"root": root, "cfg": default_run["config"], "model": pipeline.load_model(root),
            "dataset": dataset, "split": split, "durations": default_run["durations"]}


# ---------------------------------------------------------------------------
# 2. budget soundness
# ---------------------------------------------------------------------------

def test_criterion_02_budget_soundness(frozen):
    cfg = frozen["cfg"]
    scene = datagen.SceneConfig.from_dict({**cfg.scene.to_dict(), "height": 24, "width": 24, "seed": 99})
    data = datagen.generate_dataset(scene, 116)
    images = [d.image for d in data[:100]]
    labels = [d.labels for d in data[:100]]
    ctx = SuiteContext(static_mask=data[100].labels, delete_class=cfg.delete_class,
                       universal_images=[d.image for d in data[100:]], universal_batch_size=8, seed=0)
    suite = list(cfg.attacks) + [cfg.fit_attack]
    total = violations = 0
    for spec in suite:
        examples, _ = attacks.run_attack(frozen["model"], spec, images, labels, ctx)
        for e, x in zip(examples, images):
            total += 1
            bad = (np.abs(e.image - x).max() > spec.epsilon / 255 + 1e-12
                   or e.image.min() < 0.0 or e.image.max() > 1.0)
            violations += int(bad)
    record(2, total >= 1000 and violations == 0,
           f"{total} examples over {len(suite)} attacks, {violations} violations")


# ---------------------------------------------------------------------------
# 3. degeneracy identity
# ---------------------------------------------------------------------------

def test_criterion_03_single_step_ifgsm_is_fgsm(frozen):
    rng = np.random.default_rng(3)
    model = frozen["model"]
    same = 0
    for k in range(50):
        x = rng.random((16, 16, 3))
        y = rng.integers(0, model.num_classes, size=(16, 16))
        eps = float(rng.choice([1, 2, 4, 8, 16]))
        a = attacks.fgsm(model, x, y, AttackConfig(eps))
        b = attacks.ifgsm(model, x, y, AttackConfig(eps, alpha=eps, iterations=1))
        same += a.image.tobytes() == b.image.tobytes()
    record(3, same == 50, f"{same}/50 bit-identical")


# ---------------------------------------------------------------------------
# 4. uncertainty endpoints and pixel properties
# ---------------------------------------------------------------------------

def test_criterion_04_uncertainty():
    worst = 0.0
    for c in range(2, 20):
        onehot = np.eye(c)[c // 2]
        uniform = np.full(c, 1.0 / c)
        errs = [U.entropy(onehot), U.variation_ratio(onehot), abs(U.probability_margin(onehot) - 1),
                abs(U.entropy(uniform) - 1), abs(U.variation_ratio(uniform) - (1 - 1 / c)),
                U.probability_margin(uniform)]
        worst = max(worst, max(errs))
    rng = np.random.default_rng(4)
    ok_pixels = 0
    for _ in range(100):
        c = int(rng.integers(2, 20))
        p = rng.dirichlet(np.full(c, rng.uniform(0.05, 5.0)), size=100)
        e, v, m = U.entropy(p), U.variation_ratio(p), U.probability_margin(p)
        top = p.max(-1)
        ok = ((e >= 0) & (e <= 1) & (v >= 0) & (v <= 1 - 1 / c + 1e-12) & (m >= 0) & (m <= top)
              & (np.abs(v + top - 1) <= 1e-12))
        ok_pixels += int(ok.sum())
    record(4, worst <= 1e-12 and ok_pixels == 10000,
           f"endpoint max err {worst:.1e}, {ok_pixels}/10000 pixels satisfy range and identity")


# ---------------------------------------------------------------------------
# 5. metric oracles
# ---------------------------------------------------------------------------

def test_criterion_05_metric_oracles():
    rng = np.random.default_rng(5)
    auc_err = 0.0
    ada_mismatch = 0
    for k in range(500):
        n = int(rng.integers(4, 80))
        truth = rng.random(n) < 0.5
        truth[:2] = [True, False]
        d = np.round(rng.random(n) * 0.8 + 0.2 * truth, int(rng.integers(1, 3)))
        auc_err = max(auc_err, abs(M.auroc(d, truth) - trapezoid_auroc(d, truth)))
        if k < 100:
            ada_mismatch += M.ada_star(d, truth) != brute_ada_star(d, truth)
    d = rng.random(2000)
    truth = rng.random(2000) < 0.5
    tpr = M.tpr_at_fpr(d, truth)
    record(5, auc_err <= 1e-12 and ada_mismatch == 0 and abs(tpr - 0.05) <= 0.03,
           f"AuROC max diff {auc_err:.1e}, ADA* mismatches {ada_mismatch}, TPR5 {tpr:.3f}")


# ---------------------------------------------------------------------------
# 6. toy model quality
# ---------------------------------------------------------------------------

def test_criterion_06_model_quality(frozen):
    root = frozen["root"]
    val = [frozen["dataset"][i] for i in frozen["split"]["val"]]
    miou = segnet.evaluate(frozen["model"], val)
    seconds = frozen["durations"].get("train", float("nan"))
    record(6, miou >= 0.70 and seconds < 900,
           f"val mIoU {miou:.4f}, training {seconds:.0f}s")


# ---------------------------------------------------------------------------
# 7. attack-strength trends
# ---------------------------------------------------------------------------

def test_criterion_07_apsr_trends(frozen):
    rows = {r["attack"]: float(r["apsr_mean"]) for r in _rows(os.path.join(frozen["root"], "attacks", "apsr.csv"))}
    model = frozen["model"]
    test = [frozen["dataset"][i] for i in frozen["split"]["test"]]
    fgsm8 = [attacks.fgsm(model, d.image, d.labels, AttackConfig(8)).image for d in test]
    preds = segnet.predict_labels(segnet.predict_batch(model, fgsm8))
    rows["fgsm_8"] = float(np.mean([M.apsr(p, d.labels) for p, d in zip(preds, test)]))
    ok = (rows["fgsm_16"] > rows["fgsm_8"] > rows["fgsm_4"]
          and rows["ifgsm_8"] >= rows["fgsm_8"]
          and abs(rows["pgd_8"] - rows["ifgsm_8"]) <= 0.15)
    detail = ", ".join(f"{k} {rows[k]:.3f}" for k in ("fgsm_4", "fgsm_8", "fgsm_16", "ifgsm_8", "pgd_8"))
    record(7, ok, detail)


# ---------------------------------------------------------------------------
# 8. detection capability
# ---------------------------------------------------------------------------

def test_criterion_08_detection_floors(frozen):
    summary = [r for r in _rows(os.path.join(frozen["root"], "detect", "summary.csv")) if r["attack"] != "ALL"]

    def best(attack, key):
        return max(float(r[key]) for r in summary if r["attack"] == attack)

    checks = [("ifgsm_8_ll", "auroc_mean", 0.85), ("ifgsm_8_ll", "ada_star_mean", 0.80),
              ("fgsm_16", "auroc_mean", 0.85), ("fgsm_16", "ada_star_mean", 0.80),
              ("dnnm_8", "auroc_mean", 0.70)]
    results = [(a, k, best(a, k), floor) for a, k, floor in checks]
    record(8, all(v >= floor for _, _, v, floor in results),
           ", ".join(f"{a} {k.split('_mean')[0]} {v:.3f}>={floor}" for a, k, v, floor in results))


# ---------------------------------------------------------------------------
# 9. cross-attack protocol
# ---------------------------------------------------------------------------

def test_criterion_09_cross_attack(frozen):
    cfg = frozen["cfg"]
    folds = _rows(os.path.join(frozen["root"], "detect", "folds.csv"))
    access = _rows(os.path.join(frozen["root"], "detect", "access_log.csv"))
    parts = []
    ok = True
    for variant in ("CrossA", "Heatmap"):
        fits = {r["catalog"] for r in access if r["detector"] == variant and r["role"] == "fit"}
        audited = fits == {pipeline.CLEAN, cfg.fit_attack.name}
        wins = 0
        for spec in cfg.attacks:
            v = np.array([float(r["ada_star"]) for r in folds
                          if r["attack"] == spec.name and r["detector"] == variant])
            wins += v.mean() > 0.5 + 2 * v.std(ddof=1)
        ok &= audited and wins >= 6
        parts.append(f"{variant} {wins}/{len(cfg.attacks)} (fit on {sorted(fits)})")
    record(9, ok, "; ".join(parts))


# ---------------------------------------------------------------------------
# 10. OCSVM nu-property
# ---------------------------------------------------------------------------

def test_criterion_10_ocsvm_nu():
    X = np.random.default_rng(10).normal(size=(200, 8))
    det = OCSVMDetector(nu=0.1).fit(X)
    frac = float(np.mean(det.raw_score(X) < 0))
    record(10, frac <= 0.15, f"outlier fraction {frac:.3f} at nu=0.1")


# ---------------------------------------------------------------------------
# 11. end-to-end determinism
# ---------------------------------------------------------------------------

def test_criterion_11_determinism(smoke_run, tmp_path):
    second = tmp_path / "second"
    cfg = smoke_run["config"]
    for stage in pipeline.STAGES.values():
        stage(cfg, str(second))
    first = smoke_run["root"]
    csvs = []
    for base, _, files in os.walk(first):
        csvs += [os.path.relpath(os.path.join(base, f), first) for f in files if f.endswith(".csv")]
    csvs.sort()
    differ = [p for p in csvs if not filecmp.cmp(os.path.join(first, p), second / p, shallow=False)]
    report_same = filecmp.cmp(os.path.join(first, "report", "report.txt"), second / "report" / "report.txt",
                              shallow=False)
    record(11, csvs and not differ and report_same,
           f"{len(csvs) - len(differ)}/{len(csvs)} CSVs byte-identical, report.txt "
           f"{'identical' if report_same else 'differs'}")
