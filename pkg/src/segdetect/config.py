"""Experiment configuration: a versioned JSON document."""
import copy
import json
from dataclasses import asdict, dataclass, field

from .attacks import DEFAULT_SUITE, FIT_ATTACK, AttackSpec
from .datagen import SceneConfig
from .detectors import VARIANTS
from .errors import ConfigError
from .segnet import TrainConfig

SCHEMA_VERSION = 1


def _default_detectors():
    return {variant: {} for variant in VARIANTS}


@dataclass
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    count: int = 400
    train: TrainConfig = field(default_factory=TrainConfig)
    widths: tuple = (16, 32, 32)
    attacks: list = field(default_factory=lambda: list(DEFAULT_SUITE))
    fit_attack: AttackSpec = FIT_ATTACK
    static_source: int = 0          # training image whose labels are the static target
    delete_class: int = 1
    universal_images: int = 64
    universal_batch_size: int = 8
    test_limit: int = 0             # 0 keeps the whole test split
    untargeted_labels: str = "ground_truth"   # or "prediction"
    detectors: dict = field(default_factory=_default_detectors)
    cv_folds: int = 5
    fold_seed: int = 0
    attack_seed: int = 0

    def __post_init__(self):
        if self.count < 10:
            raise ConfigError(f"dataset count must be >= 10, got {self.count}")
        if self.cv_folds < 2:
            raise ConfigError(f"cv_folds must be >= 2, got {self.cv_folds}")
        names = [a.name for a in self.attacks]
        if len(set(names)) != len(names) or self.fit_attack.name in names:
            raise ConfigError("attack names must be unique and distinct from the fit attack")
        for variant in self.detectors:
            if variant not in VARIANTS:
                raise ConfigError(f"unknown detector {variant!r}")
        if self.untargeted_labels not in ("ground_truth", "prediction"):
            raise ConfigError(f"untargeted_labels must be ground_truth or prediction, "
                              f"got {self.untargeted_labels!r}")
        if not 0 <= self.delete_class < self.scene.num_classes:
            raise ConfigError(f"delete_class {self.delete_class} outside the class range")

    def with_seed(self, seed):
        """Every seed of the experiment replaced by ``seed``."""
        out = copy.deepcopy(self)
        out.scene = SceneConfig.from_dict({**self.scene.to_dict(), "seed": seed})
        out.train = TrainConfig(**{**asdict(self.train), "seed": seed})
        out.fold_seed = seed
        out.attack_seed = seed
        for params in out.detectors.values():
            if "seed" in params:
                params["seed"] = seed
        return out

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "dataset": {"count": self.count, "scene": self.scene.to_dict()},
            "train": {**asdict(self.train), "widths": list(self.widths)},
            "attacks": {
                "suite": [a.to_dict() for a in self.attacks],
                "fit_attack": self.fit_attack.to_dict(),
                "static_source": self.static_source,
                "delete_class": self.delete_class,
                "universal_images": self.universal_images,
                "universal_batch_size": self.universal_batch_size,
                "test_limit": self.test_limit,
                "untargeted_labels": self.untargeted_labels,
                "seed": self.attack_seed,
            },
            "detectors": copy.deepcopy(self.detectors),
            "cv": {"folds": self.cv_folds, "seed": self.fold_seed},
        }

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config root must be an object")
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        try:
            ds = d.get("dataset", {})
            tr = dict(d.get("train", {}))
            widths = tuple(tr.pop("widths", (16, 32, 32)))
            at = d.get("attacks", {})
            cv = d.get("cv", {})
            kwargs = dict(
                scene=SceneConfig.from_dict(ds.get("scene", {})),
                count=int(ds.get("count", 400)),
                train=TrainConfig(**tr),
                widths=widths,
                detectors={k: dict(v) for k, v in d.get("detectors", _default_detectors()).items()},
                cv_folds=int(cv.get("folds", 5)),
                fold_seed=int(cv.get("seed", 0)),
            )
            if "suite" in at:
                kwargs["attacks"] = [AttackSpec.from_dict(a) for a in at["suite"]]
            if "fit_attack" in at:
                kwargs["fit_attack"] = AttackSpec.from_dict(at["fit_attack"])
            for key in ("static_source", "delete_class", "universal_images",
                        "universal_batch_size", "test_limit"):
                if key in at:
                    kwargs[key] = int(at[key])
            if "untargeted_labels" in at:
                kwargs["untargeted_labels"] = str(at["untargeted_labels"])
            if "seed" in at:
                kwargs["attack_seed"] = int(at["seed"])
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        return cls(**kwargs)


def load_config(path):
    try:
        with open(path) as fh:
            blob = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(blob)


def dump_config(config, path):
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
