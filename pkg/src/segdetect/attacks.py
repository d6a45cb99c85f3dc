"""Adversarial example generation against a segmentation model.

Budgets (``epsilon``) and step sizes (``alpha``) are given in 1/255 intensity
units and mapped to the [0, 1] image range internally. Every produced image
lies within the epsilon ball around its source and inside [0, 1].
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .segnet import predict_labels, predict_probs
from .tensor import Tensor, backward, softmax_cross_entropy

log = logging.getLogger(__name__)

UNTARGETED, TARGETED = "untargeted", "targeted"
TARGET_SOURCES = ("none", "least_likely", "static_mask", "delete_class")


def default_iterations(epsilon):
    """min(eps + 4, floor(1.25 eps)), at least one step."""
    return max(1, int(min(epsilon + 4, np.floor(1.25 * epsilon))))


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    alpha: float = 1.0
    iterations: Optional[int] = None
    mode: str = UNTARGETED
    target_source: str = "none"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.iterations is not None and self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.mode not in (UNTARGETED, TARGETED):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.target_source not in TARGET_SOURCES:
            raise ValueError(f"unknown target source {self.target_source!r}")

    @property
    def n(self):
        return self.iterations if self.iterations is not None else default_iterations(self.epsilon)

    @property
    def eps(self):
        return self.epsilon / 255.0

    @property
    def step(self):
        return self.alpha / 255.0

    @property
    def direction(self):
        return 1.0 if self.mode == UNTARGETED else -1.0


@dataclass
class AdversarialExample:
    image: np.ndarray
    source_index: int
    attack: str
    linf: float
    trace: list = field(default_factory=list)


def _example(x_adv, x, source_index, attack, trace=None):
    return AdversarialExample(x_adv, int(source_index), attack,
                              float(np.abs(x_adv - x).max()), trace or [])


def clip_ball(x_adv, x, eps):
    """Project onto [x - eps, x + eps] and then onto [0, 1]."""
    return np.clip(np.minimum(np.maximum(x_adv, x - eps), x + eps), 0.0, 1.0)


def input_gradient(model, image, labels, mask=None):
    """(loss, d loss / d image) for the mean pixel cross entropy.

    ``image`` may be a single ``(H,W,C)`` image or a batch.
    """
    x = Tensor(image, requires_grad=True)
    loss = softmax_cross_entropy(model.forward(x), labels, mask)
    return loss.item(), backward(loss)[x]


# ---------------------------------------------------------------------------
# target constructors
# ---------------------------------------------------------------------------

def least_likely_target(probs):
    """Per-pixel argmin of the class probabilities, ties to the lowest index."""
    return np.argmin(probs, axis=-1)


def static_target(reference_labels, shape=None):
    """A fixed label map reused for every attacked image."""
    ref = np.array(reference_labels, dtype=np.int64)
    if shape is not None and ref.shape != tuple(shape):
        raise ValueError(f"static target {ref.shape} does not match image shape {tuple(shape)}")
    return ref


def dnnm_target(prediction, delete_class, chunk=512):
    """Relabel ``delete_class`` pixels with the class of the nearest pixel
    (Euclidean, ties broken by scan order) that is not ``delete_class``."""
    pred = np.asarray(prediction)
    deleted = pred == delete_class
    if not deleted.any():
        return pred.copy()
    if deleted.all():
        raise ValueError(f"every pixel is class {delete_class}; no donor pixels")
    donors = np.argwhere(~deleted)  # scan (row-major) order
    donor_cls = pred[~deleted]
    holes = np.argwhere(deleted)
    out = pred.copy()
    for start in range(0, len(holes), chunk):
        h = holes[start:start + chunk]
        d2 = ((h[:, None, :] - donors[None, :, :]) ** 2).sum(axis=2)
        out[h[:, 0], h[:, 1]] = donor_cls[np.argmin(d2, axis=1)]
    return out


# ---------------------------------------------------------------------------
# single-image attacks
# ---------------------------------------------------------------------------

def fgsm(model, image, labels, config, source_index=-1, name="fgsm"):
    """One signed-gradient step of size epsilon, ascending the loss."""
    _, g = input_gradient(model, image, labels)
    x_adv = np.clip(image + config.eps * np.sign(g), 0.0, 1.0)
    return _example(x_adv, image, source_index, name)


def fgsm_targeted(model, image, target_labels, config, source_index=-1, name="fgsm_ll"):
    """One signed-gradient step of size epsilon, descending the target loss."""
    _, g = input_gradient(model, image, target_labels)
    x_adv = np.clip(image - config.eps * np.sign(g), 0.0, 1.0)
    return _example(x_adv, image, source_index, name)


def ifgsm(model, image, labels, config, source_index=-1, name="ifgsm", check=None):
    """Iterated signed steps of size alpha, each clipped to the epsilon ball.

    ``labels`` are ground truth for untargeted mode, the target otherwise.
    """
    x_adv = image
    for _ in range(config.n):
        _, g = input_gradient(model, x_adv, labels)
        x_adv = clip_ball(x_adv + config.direction * config.step * np.sign(g), image, config.eps)
        if check is not None:
            check(x_adv)
    return _example(x_adv, image, source_index, name)


def pgd(model, image, labels, config, source_index=-1, name="pgd", check=None):
    """Projected steps along the raw gradient, rescaled to unit max-norm."""
    x_adv = image
    for _ in range(config.n):
        _, g = input_gradient(model, x_adv, labels)
        gmax = np.abs(g).max()
        if gmax == 0:
            continue
        x_adv = clip_ball(x_adv + config.direction * config.step * (g / gmax), image, config.eps)
        if check is not None:
            check(x_adv)
    return _example(x_adv, image, source_index, name)


def dag_attack(model, image, target, config, source_index=-1, name="dag", check=None):
    """Targeted attack restricted to the pixels not yet predicting their target.

    Stops once more than half of the pixels whose clean prediction disagreed
    with the target have been flipped, or after ``config.n`` steps. The trace
    records the active-set size before every step.
    """
    target = np.asarray(target)
    x_adv = image
    trace = []
    initial = None
    for _ in range(config.n + 1):
        pred = predict_labels(predict_probs(model, x_adv))
        active = pred != target
        count = int(active.sum())
        trace.append(count)
        if initial is None:
            initial = count
        if count == 0 or initial - count > 0.5 * initial or len(trace) > config.n:
            break
        _, g = input_gradient(model, x_adv, target, mask=active)
        gmax = np.abs(g).max()
        if gmax == 0:
            break
        x_adv = clip_ball(x_adv - config.step * (g / gmax), image, config.eps)
        if check is not None:
            check(x_adv)
    return _example(x_adv, image, source_index, name, trace)


# ---------------------------------------------------------------------------
# universal perturbation
# ---------------------------------------------------------------------------

def universal_perturbation(model, train_images, target, config, batch_size=8, seed=0):
    """Single noise tensor driving images toward ``target``.

    ``target`` is one label map shared by all images or a list with one map
    per training image. Each epoch visits the training images in seeded
    random mini-batches; every batch takes a signed step of size alpha on the
    mean target loss, followed by projection onto the epsilon ball.
    """
    images = np.stack([np.asarray(x, dtype=np.float64) for x in train_images])
    if images.shape[0] == 0:
        raise ValueError("universal perturbation needs training images")
    if isinstance(target, (list, tuple)) or np.ndim(target) == 3:
        targets = np.stack([np.asarray(t) for t in target])
    else:
        targets = np.broadcast_to(np.asarray(target), images.shape[:3])
    if targets.shape != images.shape[:3]:
        raise ValueError(f"targets {targets.shape} do not match images {images.shape}")
    rng = np.random.default_rng(seed)
    noise = np.zeros(images.shape[1:])
    for _ in range(config.n):
        order = rng.permutation(images.shape[0])
        for start in range(0, len(order), batch_size):
            b = order[start:start + batch_size]
            x = np.clip(images[b] + noise, 0.0, 1.0)
            _, g = input_gradient(model, x, targets[b])
            noise = np.clip(noise - config.step * np.sign(g.sum(axis=0)), -config.eps, config.eps)
    return noise


def apply_universal(noise, image, source_index=-1, name="universal"):
    return _example(np.clip(image + noise, 0.0, 1.0), image, source_index, name)


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttackSpec:
    """One catalog of the suite: a method, budget and target source."""
    name: str
    method: str                      # fgsm | ifgsm | pgd | dag | universal
    epsilon: float
    alpha: Optional[float] = None
    iterations: Optional[int] = None
    target: str = "none"             # none | least_likely | static_mask | delete_class

    def __post_init__(self):
        if self.method not in ("fgsm", "ifgsm", "pgd", "dag", "universal"):
            raise ValueError(f"unknown attack method {self.method!r}")
        self.config()

    @property
    def group(self):
        return {"none": "untargeted", "least_likely": "least-likely",
                "static_mask": "static-target", "delete_class": "class-deletion"}[self.target]

    def config(self):
        mode = UNTARGETED if self.target == "none" else TARGETED
        alpha = self.alpha if self.alpha is not None else 1.0
        return AttackConfig(self.epsilon, alpha, self.iterations, mode, self.target)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return {"name": self.name, "method": self.method, "epsilon": self.epsilon,
                "alpha": self.alpha, "iterations": self.iterations, "target": self.target}


DEFAULT_SUITE = (
    AttackSpec("fgsm_4", "fgsm", 4),
    AttackSpec("fgsm_16", "fgsm", 16),
    AttackSpec("ifgsm_8", "ifgsm", 8),
    AttackSpec("ifgsm_8_ll", "ifgsm", 8, target="least_likely"),
    AttackSpec("pgd_8", "pgd", 8, alpha=128),
    AttackSpec("pgd_8_tar", "pgd", 8, alpha=128, target="static_mask"),
    AttackSpec("ssmm_8", "universal", 8, alpha=1, iterations=10, target="static_mask"),
    AttackSpec("dnnm_8", "universal", 8, alpha=1, iterations=10, target="delete_class"),
    AttackSpec("dag_8_tar", "dag", 8, alpha=2, target="static_mask"),
)

FIT_ATTACK = AttackSpec("fgsm_2_ll", "fgsm", 2, target="least_likely")


@dataclass
class SuiteContext:
    """Shared inputs of a suite run.

    ``static_mask`` is the reference label map for static targets;
    ``universal_images`` are the training images for universal noise.
    """
    static_mask: Optional[np.ndarray] = None
    delete_class: int = 1
    universal_images: list = field(default_factory=list)
    untargeted_labels: str = "ground_truth"   # or "prediction"
    universal_batch_size: int = 8
    seed: int = 0


def _target_for(spec, ctx, probs):
    if spec.target == "least_likely":
        return least_likely_target(probs)
    if spec.target == "static_mask":
        if ctx.static_mask is None:
            raise ValueError(f"{spec.name}: no static target configured")
        return static_target(ctx.static_mask, probs.shape[:-1])
    if spec.target == "delete_class":
        return dnnm_target(predict_labels(probs), ctx.delete_class)
    raise ValueError(f"{spec.name}: target source {spec.target!r} needs no target map")


def run_attack(model, spec, images, labels, ctx, indices=None):
    """Adversarial examples for every image under one suite entry.

    Returns ``(examples, extras)``; extras carries the universal noise when
    one was fitted.
    """
    cfg = spec.config()
    indices = list(range(len(images))) if indices is None else list(indices)
    extras = {}
    if spec.method == "universal":
        if not ctx.universal_images:
            raise ValueError(f"{spec.name}: universal attacks need training images")
        if spec.target == "static_mask":
            target = static_target(ctx.static_mask, np.shape(ctx.universal_images[0])[:2])
        else:
            target = [_target_for(spec, ctx, predict_probs(model, x)) for x in ctx.universal_images]
        noise = universal_perturbation(model, ctx.universal_images, target, cfg,
                                       ctx.universal_batch_size, ctx.seed)
        extras["noise"] = noise
        return [apply_universal(noise, x, i, spec.name) for x, i in zip(images, indices)], extras

    out = []
    for x, y, i in zip(images, labels, indices):
        if spec.target == "none":
            if ctx.untargeted_labels == "prediction":
                y = predict_labels(predict_probs(model, x))
            lab = y
        else:
            lab = _target_for(spec, ctx, predict_probs(model, x))
        if spec.method == "fgsm":
            fn = fgsm if spec.target == "none" else fgsm_targeted
            out.append(fn(model, x, lab, cfg, i, spec.name))
        elif spec.method == "ifgsm":
            out.append(ifgsm(model, x, lab, cfg, i, spec.name))
        elif spec.method == "pgd":
            out.append(pgd(model, x, lab, cfg, i, spec.name))
        elif spec.method == "dag":
            out.append(dag_attack(model, x, lab, cfg, i, spec.name))
        else:
            raise ValueError(f"unknown attack method {spec.method!r}")
    return out, extras


def apply_attack_suite(model, images, labels, suite, ctx, indices=None):
    """``{spec.name: (examples, extras)}`` in suite order."""
    catalog = {}
    for spec in suite:
        log.info("running attack %s", spec.name)
        catalog[spec.name] = run_attack(model, spec, images, labels, ctx, indices)
    return catalog
