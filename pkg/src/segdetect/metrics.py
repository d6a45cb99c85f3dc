"""Attack strength and detection metrics, plus k-fold cross-validation.

Detector scores ``d`` are probabilities of being benign; an image is flagged
as perturbed when ``d < tau``. Perturbed images are the positives.
"""
import csv
from dataclasses import dataclass, field

import numpy as np

TAU_GRID = np.linspace(0.0, 1.0, 40)


def apsr(predictions, labels):
    """Fraction of pixels whose predicted class differs from ground truth."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"shape mismatch {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise ValueError("empty label map")
    return float(np.mean(predictions != labels))


def _split(d, is_benign):
    d = np.asarray(d, dtype=np.float64)
    is_benign = np.asarray(is_benign, dtype=bool)
    if d.shape != is_benign.shape or d.ndim != 1:
        raise ValueError("scores and truth flags must be 1-D and of equal length")
    if not np.isfinite(d).all():
        raise ValueError("scores must be finite")
    return d[is_benign], d[~is_benign]


def ada(d, is_benign, tau):
    """Share of images classified correctly at threshold ``tau``."""
    benign, perturbed = _split(d, is_benign)
    total = benign.size + perturbed.size
    if total == 0:
        raise ValueError("ada of an empty sample")
    return float((np.sum(benign >= tau) + np.sum(perturbed < tau)) / total)


def ada_star(d, is_benign, grid=TAU_GRID):
    """Best ``ada`` over the 40-point threshold grid."""
    benign, perturbed = _split(d, is_benign)
    total = benign.size + perturbed.size
    if total == 0:
        raise ValueError("ada_star of an empty sample")
    tau = np.asarray(grid)[:, None]
    correct = (benign[None, :] >= tau).sum(axis=1) + (perturbed[None, :] < tau).sum(axis=1)
    return float(correct.max() / total)


def auroc(d, is_benign):
    """Mann-Whitney estimate of P(d_benign > d_perturbed), ties counted half."""
    benign, perturbed = _split(d, is_benign)
    if benign.size == 0 or perturbed.size == 0:
        raise ValueError("auroc needs both benign and perturbed samples")
    # rank-based pair counting, O(n log n)
    order = np.sort(perturbed)
    below = np.searchsorted(order, benign, side="left")
    at_or_below = np.searchsorted(order, benign, side="right")
    greater = below.sum()
    ties = (at_or_below - below).sum()
    return float((greater + 0.5 * ties) / (benign.size * perturbed.size))


def tpr_at_fpr(d, is_benign, fpr_cap=0.05):
    """Detection rate at the largest threshold whose benign false-positive
    rate stays within ``fpr_cap``."""
    benign, perturbed = _split(d, is_benign)
    if benign.size == 0 or perturbed.size == 0:
        raise ValueError("tpr_at_fpr needs both benign and perturbed samples")
    allowed = int(np.floor(fpr_cap * benign.size + 1e-12))
    tau = np.sort(benign)[allowed]
    return float(np.mean(perturbed < tau))


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

def fold_assignment(n, k, seed):
    """Round-robin fold ids over a seeded permutation of ``range(n)``."""
    if k < 2:
        raise ValueError(f"need k >= 2 folds, got {k}")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.int64)
    folds[perm] = np.arange(n) % k
    return folds


@dataclass
class FoldResult:
    fold: int
    ada_star: float
    auroc: float
    tpr5: float
    train_benign: np.ndarray
    test_benign: np.ndarray
    test_adversarial: np.ndarray
    scores: np.ndarray
    is_benign: np.ndarray


@dataclass
class CVResult:
    folds: list = field(default_factory=list)

    def values(self, name):
        return np.array([getattr(f, name) for f in self.folds])

    def mean(self, name):
        return float(self.values(name).mean())

    def std(self, name):
        return float(self.values(name).std())

    def summary(self):
        out = {}
        for name in ("ada_star", "auroc", "tpr5"):
            out[f"{name}_mean"] = self.mean(name)
            out[f"{name}_std"] = self.std(name)
        return out


def _take(items, idx):
    if isinstance(items, np.ndarray):
        return items[idx]
    return [items[i] for i in idx]


def cross_validate(make_detector, benign, adversarial, k=5, seed=0,
                   adversarial_source=None, fit_adversarial=None, fit_adversarial_source=None):
    """k-fold evaluation of a detector against one adversarial collection.

    ``benign`` and ``adversarial`` are index-aligned collections of detector
    inputs. ``adversarial_source[j]`` names the benign image that
    ``adversarial[j]`` was derived from; such pairs always share a fold.
    Without sources, the two classes are partitioned independently.
    Supervised detectors get ``fit_adversarial`` (restricted to the training
    folds through ``fit_adversarial_source``) as their perturbed class.
    """
    sources = None if adversarial_source is None else {"_": adversarial_source}
    return cross_validate_suite(make_detector, benign, {"_": adversarial}, k, seed, sources,
                                fit_adversarial, fit_adversarial_source)["_"]


def cross_validate_suite(make_detector, benign, catalogs, k=5, seed=0, sources=None,
                         fit_adversarial=None, fit_adversarial_source=None):
    """Like ``cross_validate`` for several adversarial catalogs at once.

    The detector of a fold is fitted once and scored on every catalog, so the
    fit never depends on the catalog being evaluated. Returns
    ``{name: CVResult}`` in the order of ``catalogs``.
    """
    n_b = len(benign)
    if n_b < k:
        raise ValueError(f"cannot build {k} folds from {n_b} benign samples")
    benign_fold = fold_assignment(n_b, k, seed)
    adv_folds = {}
    for j, (name, adv) in enumerate(catalogs.items()):
        if len(adv) < 1:
            raise ValueError(f"catalog {name!r} is empty")
        if sources is None or sources.get(name) is None:
            adv_folds[name] = fold_assignment(len(adv), k, seed + 1 + j)
        else:
            adv_folds[name] = benign_fold[np.asarray(sources[name])]
        for f in range(k):
            if not np.any(benign_fold == f) or not np.any(adv_folds[name] == f):
                raise ValueError(f"fold {f} of {name!r} would hold a single class")
    fit_fold = None
    if fit_adversarial is not None:
        if fit_adversarial_source is None:
            fit_fold = fold_assignment(len(fit_adversarial), k, seed + 1 + len(catalogs))
        else:
            fit_fold = benign_fold[np.asarray(fit_adversarial_source)]

    results = {name: CVResult() for name in catalogs}
    for f in range(k):
        tr_b = np.flatnonzero(benign_fold != f)
        te_b = np.flatnonzero(benign_fold == f)
        det = make_detector()
        if fit_adversarial is not None:
            det.fit(_take(benign, tr_b), _take(fit_adversarial, np.flatnonzero(fit_fold != f)))
        else:
            det.fit(_take(benign, tr_b))
        benign_scores = det.score(_take(benign, te_b))
        for name, adv in catalogs.items():
            te_a = np.flatnonzero(adv_folds[name] == f)
            scores = np.concatenate([benign_scores, det.score(_take(adv, te_a))])
            truth = np.concatenate([np.ones(te_b.size, bool), np.zeros(te_a.size, bool)])
            results[name].folds.append(FoldResult(
                fold=f, ada_star=ada_star(scores, truth), auroc=auroc(scores, truth),
                tpr5=tpr_at_fpr(scores, truth), train_benign=tr_b, test_benign=te_b,
                test_adversarial=te_a, scores=scores, is_benign=truth))
    return results


def write_fold_csv(path, rows):
    """rows: iterable of (attack, detector, CVResult)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["attack", "detector", "fold", "ada_star", "auroc", "tpr5"])
        for attack, detector, cv in rows:
            for f in cv.folds:
                w.writerow([attack, detector, f.fold, repr(f.ada_star), repr(f.auroc), repr(f.tpr5)])


def write_summary_csv(path, rows):
    """Mean/std per cell plus a final grand-average ADA* row."""
    cols = ["ada_star_mean", "ada_star_std", "auroc_mean", "auroc_std", "tpr5_mean", "tpr5_std"]
    stars = []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["attack", "detector"] + cols)
        for attack, detector, cv in rows:
            s = cv.summary()
            stars.append(s["ada_star_mean"])
            w.writerow([attack, detector] + [repr(s[c]) for c in cols])
        grand = float(np.mean(stars)) if stars else float("nan")
        w.writerow(["ALL", "ALL", repr(grand)] + [""] * (len(cols) - 1))
