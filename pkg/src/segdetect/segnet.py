"""Toy fully-convolutional segmentation network, training and checkpoints."""
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import sstn
from .errors import FormatError, NumericError, ShapeError
from .tensor import Tensor, _softmax, add, backward, conv2d, mul, relu, softmax_cross_entropy

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "segdetect-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 8
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0 or not 0 <= self.momentum < 1:
            raise ValueError(f"invalid training configuration {self}")


@dataclass
class SegModel:
    """Stack of 3x3 conv + ReLU blocks followed by a 1x1 logit head.

    ``weights`` holds ``(kernel, bias)`` array pairs; all convolutions use
    same-padding, so output and input share their spatial shape. Inputs are
    standardized per channel with ``input_mean`` / ``input_std`` first.
    """
    weights: list
    num_classes: int
    in_channels: int
    widths: tuple = (16, 32, 32)
    metadata: dict = field(default_factory=dict)
    input_mean: np.ndarray = None
    input_std: np.ndarray = None

    def __post_init__(self):
        if self.input_mean is None:
            self.input_mean = np.zeros(self.in_channels)
        if self.input_std is None:
            self.input_std = np.ones(self.in_channels)
        self.input_mean = np.asarray(self.input_mean, dtype=np.float64)
        self.input_std = np.asarray(self.input_std, dtype=np.float64)

    @property
    def architecture(self):
        blocks = "-".join(f"c3x{w}r" for w in self.widths)
        return f"{blocks}-c1x{self.num_classes}"

    def forward(self, x, trainable=False):
        """Logits tensor for a ``(H,W,C)`` or ``(N,H,W,C)`` array/tensor."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.shape[-1] != self.in_channels:
            raise ShapeError(f"model expects {self.in_channels} input channels, got image {x.shape}")
        x = mul(add(x, -self.input_mean), 1.0 / self.input_std)
        return forward_params(self.parameters(trainable), x)

    def parameters(self, trainable=False):
        return [(Tensor(w, requires_grad=trainable), Tensor(b, requires_grad=trainable))
                for w, b in self.weights]

    def copy(self):
        return SegModel([(w.copy(), b.copy()) for w, b in self.weights], self.num_classes,
                        self.in_channels, tuple(self.widths), json.loads(json.dumps(self.metadata)),
                        self.input_mean.copy(), self.input_std.copy())


def forward_params(params, x):
    last = len(params) - 1
    for i, (w, b) in enumerate(params):
        x = conv2d(x, w, b, stride=1, padding=w.shape[0] // 2)
        if i != last:
            x = relu(x)
    return x


def init_model(num_classes, in_channels, widths=(16, 32, 32), seed=0):
    """He-normal kernels, zero biases."""
    rng = np.random.default_rng(seed)
    weights = []
    cin = in_channels
    for width in widths:
        std = np.sqrt(2.0 / (9 * cin))
        weights.append((rng.normal(0.0, std, size=(3, 3, cin, width)), np.zeros(width)))
        cin = width
    std = np.sqrt(1.0 / cin)
    weights.append((rng.normal(0.0, std, size=(1, 1, cin, num_classes)), np.zeros(num_classes)))
    return SegModel(weights, num_classes, in_channels, tuple(widths),
                    {"init_seed": int(seed)})


def predict_probs(model, image):
    """Per-pixel class probabilities, shape ``image.shape[:-1] + (|C|,)``."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim not in (3, 4):
        raise ShapeError(f"expected an (H,W,C) image or a batch, got {image.shape}")
    return _softmax(model.forward(image).data)


def predict_labels(probs):
    """Argmax over classes; ties go to the lowest class index."""
    return np.argmax(probs, axis=-1)


def predict_batch(model, images, batch_size=16):
    out = []
    for start in range(0, len(images), batch_size):
        out.append(predict_probs(model, np.stack(images[start:start + batch_size])))
    return np.concatenate(out) if out else np.empty((0,))


def miou(predictions, labels, num_classes=None):
    """Mean IoU over classes present in prediction or ground truth."""
    if len(predictions) == 0 or len(predictions) != len(labels):
        raise ValueError("miou needs equal-length, non-empty prediction and label lists")
    pred = np.concatenate([np.asarray(p).ravel() for p in predictions])
    true = np.concatenate([np.asarray(t).ravel() for t in labels])
    if pred.shape != true.shape:
        raise ShapeError("prediction and label maps differ in size")
    if num_classes is None:
        num_classes = int(max(pred.max(), true.max())) + 1
    conf = np.bincount(true * num_classes + pred, minlength=num_classes ** 2)
    conf = conf.reshape(num_classes, num_classes)
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    present = union > 0
    return float((inter[present] / union[present]).mean())


def evaluate(model, dataset, batch_size=16):
    probs = predict_batch(model, [d.image for d in dataset], batch_size)
    preds = predict_labels(probs)
    return miou(list(preds), [d.labels for d in dataset], model.num_classes)


def train(train_set, config, val_set=None, widths=(16, 32, 32), num_classes=None, callback=None):
    """Mini-batch SGD with momentum on the mean pixel cross entropy.

    Returns ``(model, history)``. The model is the epoch with the best
    validation mIoU (training mIoU if no validation set is given).
    ``history`` holds one dict per epoch.
    """
    if not train_set:
        raise ValueError("empty training split")
    if num_classes is None:
        num_classes = int(max(d.labels.max() for d in train_set)) + 1
    in_channels = train_set[0].image.shape[-1]
    model = init_model(num_classes, in_channels, widths, seed=config.seed)
    model.metadata["train"] = asdict(config)
    images = np.stack([d.image for d in train_set])
    model.input_mean = images.mean(axis=(0, 1, 2))
    std = images.std(axis=(0, 1, 2))
    model.input_std = np.where(std > 0, std, 1.0)
    if config.epochs == 0:
        return model, []

    rng = np.random.default_rng([config.seed, 1])
    norm = (images - model.input_mean) / model.input_std
    labels = np.stack([d.labels for d in train_set])
    velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in model.weights]
    weights = [(w.copy(), b.copy()) for w, b in model.weights]
    best, best_score, history = None, -1.0, []
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            params = [(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)) for w, b in weights]
            logits = forward_params(params, Tensor(norm[batch]))
            loss = softmax_cross_entropy(logits, labels[batch])
            if not np.isfinite(loss.item()):
                raise NumericError(f"training diverged at epoch {epoch}: loss {loss.item()}")
            grads = backward(loss)
            for k, ((w, b), (vw, vb)) in enumerate(zip(params, velocity)):
                vw *= config.momentum
                vw -= config.learning_rate * grads[w]
                vb *= config.momentum
                vb -= config.learning_rate * grads[b]
                weights[k] = (weights[k][0] + vw, weights[k][1] + vb)
            losses.append(loss.item())
        model.weights = [(w.copy(), b.copy()) for w, b in weights]
        record = {"epoch": epoch + 1, "train_loss": float(np.mean(losses))}
        score_set = val_set if val_set else train_set
        score = evaluate(model, score_set)
        record["val_miou" if val_set else "train_miou"] = score
        if val_set:
            vprobs = predict_batch(model, [d.image for d in val_set])
            flat = vprobs.reshape(-1, num_classes)
            true = np.concatenate([d.labels.ravel() for d in val_set])
            vloss = -np.log(np.maximum(flat[np.arange(flat.shape[0]), true], 1e-12)).mean()
            if not np.isfinite(vloss):
                raise NumericError(f"validation loss not finite at epoch {epoch + 1}")
            record["val_loss"] = float(vloss)
        history.append(record)
        log.info("epoch %d %s", epoch + 1, record)
        if callback is not None:
            callback(record)
        if score > best_score:
            best_score = score
            best = [(w.copy(), b.copy()) for w, b in weights]
            model.metadata["best_epoch"] = epoch + 1
            model.metadata["best_score"] = score
    model.weights = best
    return model, history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model):
    """Directory with one SSTN1 file per weight tensor and ``meta.json``."""
    os.makedirs(path, exist_ok=True)
    files = []
    for i, (w, b) in enumerate(model.weights):
        wn, bn = f"layer{i}_kernel.sstn", f"layer{i}_bias.sstn"
        sstn.save(os.path.join(path, wn), w)
        sstn.save(os.path.join(path, bn), b)
        files.append([wn, bn])
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": model.architecture,
        "num_classes": model.num_classes,
        "in_channels": model.in_channels,
        "widths": list(model.widths),
        "input_mean": model.input_mean.tolist(),
        "input_std": model.input_std.tolist(),
        "files": files,
        "metadata": model.metadata,
    }
    with open(os.path.join(path, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    mpath = os.path.join(path, "meta.json")
    try:
        with open(mpath) as fh:
            meta = json.load(fh)
    except FileNotFoundError as exc:
        raise FormatError(f"no checkpoint metadata at {mpath}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt checkpoint metadata {mpath}: {exc}") from exc
    if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{mpath}: not a version-{CHECKPOINT_VERSION} checkpoint")
    weights = [(sstn.load(os.path.join(path, wn)), sstn.load(os.path.join(path, bn)))
               for wn, bn in meta["files"]]
    model = SegModel(weights, meta["num_classes"], meta["in_channels"],
                     tuple(meta["widths"]), meta["metadata"],
                     np.array(meta["input_mean"]), np.array(meta["input_std"]))
    if model.architecture != meta["architecture"]:
        raise FormatError(f"{mpath}: architecture string does not match stored weights")
    return model
