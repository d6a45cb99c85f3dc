"""Pixel-wise dispersion heatmaps and image-level uncertainty features."""
import csv
from dataclasses import dataclass

import numpy as np

KINDS = ("entropy", "variation_ratio", "probability_margin")


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray
    kind: str


def _check(probs):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim < 1 or probs.shape[-1] < 2:
        raise ValueError(f"need a probability field with >= 2 classes, got shape {probs.shape}")
    return probs


def entropy(probs):
    """Normalized entropy in [0, 1]; 0 log 0 is taken as 0."""
    probs = _check(probs)
    plogp = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    return np.clip(-plogp.sum(axis=-1) / np.log(probs.shape[-1]), 0.0, 1.0)


def variation_ratio(probs):
    probs = _check(probs)
    return 1.0 - probs.max(axis=-1)


def probability_margin(probs):
    """Top probability minus the runner-up."""
    probs = _check(probs)
    top2 = np.partition(probs, -2, axis=-1)[..., -2:]
    return top2[..., 1] - top2[..., 0]


def entropy_heatmap(probs):
    return Heatmap(entropy(probs), "entropy")


def variation_ratio_heatmap(probs):
    return Heatmap(variation_ratio(probs), "variation_ratio")


def probability_margin_heatmap(probs):
    return Heatmap(probability_margin(probs), "probability_margin")


@dataclass(frozen=True)
class UncertaintyFeatures:
    mean_entropy: float
    mean_variation_ratio: float
    mean_margin: float
    class_mean_probs: np.ndarray

    def as_vector(self):
        return np.concatenate([[self.mean_entropy, self.mean_variation_ratio, self.mean_margin],
                               self.class_mean_probs])

    def __len__(self):
        return 3 + len(self.class_mean_probs)


def aggregate_features(probs):
    """Pixel means of the three heatmaps plus the mean probability of every
    class channel (taken over all pixels, so the class means sum to one)."""
    probs = _check(probs)
    flat = probs.reshape(-1, probs.shape[-1])
    return UncertaintyFeatures(
        mean_entropy=float(entropy(flat).mean()),
        mean_variation_ratio=float(variation_ratio(flat).mean()),
        mean_margin=float(probability_margin(flat).mean()),
        class_mean_probs=flat.mean(axis=0),
    )


def feature_matrix(prob_fields):
    """Stack features of many fields into an ``(n, |C| + 3)`` array."""
    return np.array([aggregate_features(p).as_vector() for p in prob_fields])


def feature_names(num_classes):
    return ["mean_entropy", "mean_variation_ratio", "mean_margin"] + \
        [f"class_{c}_mean_prob" for c in range(num_classes)]


def write_features_csv(path, image_ids, attack, features):
    features = np.asarray(features)
    num_classes = features.shape[1] - 3
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "attack"] + feature_names(num_classes))
        for image_id, row in zip(image_ids, features):
            writer.writerow([int(image_id), attack] + [repr(float(v)) for v in row])


def read_features_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    ids = np.array([int(r[0]) for r in rows[1:]], dtype=np.int64)
    feats = np.array([[float(v) for v in r[2:]] for r in rows[1:]])
    attacks = [r[1] for r in rows[1:]]
    return ids, attacks, feats
