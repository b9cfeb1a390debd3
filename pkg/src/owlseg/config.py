"""Experiment configuration: one JSON document covering dataset, registry,
model, losses, inference, and training budgets.

Parsing is strict: unknown keys fail fast, and the seed is mandatory. The
canonical form (sorted keys, no output directory) is what command manifests
hash, so two runs with the same canonical config are the same experiment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .core import ClassRegistry, ConfigError
from .data import SceneConfig, default_scene_config
from .losses import LossConfig
from .network import ArchConfig
from .synthesis import SynthesisConfig


def _reject_unknown(d: dict, allowed: set[str], context: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {context}: {sorted(unknown)}")


_SHAPE_KEYS = {"name", "class_id", "kind", "size_min", "size_max", "count_min", "count_max"}
_SCENE_KEYS = {
    "points_per_scan", "known_shape_classes", "novel_shape_classes", "rng_seed",
    "scene_extent", "noise_sigma", "ground_fraction", "min_object_points",
}
_ARCH_KEYS = {"hidden_width", "dropout_rate", "voxel_size", "coord_scale"}
_SYNTH_KEYS = {
    "source_classes", "select_prob", "shrink_lo", "shrink_hi", "enlarge_lo", "enlarge_hi",
}
_LOSS_KEYS = {"lambda_syn", "lambda_cal"}


def _check_scene_keys(scene: dict) -> None:
    _reject_unknown(scene, _SCENE_KEYS, "dataset.scene")
    for group in ("known_shape_classes", "novel_shape_classes"):
        for shape in scene.get(group, []):
            _reject_unknown(shape, _SHAPE_KEYS, f"dataset.scene.{group}[]")


@dataclass(frozen=True)
class DatasetSection:
    """Synthetic scenes (generated under the experiment root) or a directory
    of scan/label files in the standard binary layout."""

    kind: str = "synthetic"
    scene: SceneConfig = field(default_factory=default_scene_config)
    num_train: int = 24
    num_val: int = 8
    scan_dir: Optional[str] = None
    label_dir: Optional[str] = None
    train_names: tuple[str, ...] = ()
    val_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("synthetic", "semantickitti"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "synthetic":
            if self.num_train < 1 or self.num_val < 1:
                raise ConfigError("synthetic datasets need train and val scenes")
        else:
            if not self.scan_dir or not self.label_dir:
                raise ConfigError("semantickitti datasets need scan_dir and label_dir")
            if not self.train_names or not self.val_names:
                raise ConfigError("semantickitti datasets need explicit name splits")

    def to_json_dict(self) -> dict:
        if self.kind == "synthetic":
            return {
                "kind": self.kind,
                "scene": self.scene.to_json_dict(),
                "num_train": self.num_train,
                "num_val": self.num_val,
            }
        return {
            "kind": self.kind,
            "scan_dir": self.scan_dir,
            "label_dir": self.label_dir,
            "train_names": list(self.train_names),
            "val_names": list(self.val_names),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "DatasetSection":
        _reject_unknown(
            d,
            {"kind", "scene", "num_train", "num_val", "scan_dir", "label_dir",
             "train_names", "val_names"},
            "dataset",
        )
        kind = d.get("kind", "synthetic")
        if kind == "synthetic":
            if "scene" in d:
                _check_scene_keys(d["scene"])
                scene = SceneConfig.from_json_dict(d["scene"])
            else:
                scene = default_scene_config()
            return cls(
                kind=kind,
                scene=scene,
                num_train=int(d.get("num_train", 24)),
                num_val=int(d.get("num_val", 8)),
            )
        return cls(
            kind=kind,
            scan_dir=d.get("scan_dir"),
            label_dir=d.get("label_dir"),
            train_names=tuple(d.get("train_names", ())),
            val_names=tuple(d.get("val_names", ())),
        )


@dataclass(frozen=True)
class RegistrySection:
    old_classes: tuple[int, ...] = (1, 2, 3, 4, 5)
    novel_classes: tuple[int, ...] = (6,)
    rc_total: int = 3

    def __post_init__(self):
        object.__setattr__(self, "old_classes", tuple(int(c) for c in self.old_classes))
        object.__setattr__(self, "novel_classes", tuple(int(c) for c in self.novel_classes))

    def build(self) -> ClassRegistry:
        return ClassRegistry(
            old_classes=self.old_classes,
            remaining_novel=frozenset(self.novel_classes),
            rc_total=self.rc_total,
        )

    def to_json_dict(self) -> dict:
        return {
            "old_classes": list(self.old_classes),
            "novel_classes": list(self.novel_classes),
            "rc_total": self.rc_total,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "RegistrySection":
        _reject_unknown(d, {"old_classes", "novel_classes", "rc_total"}, "registry")
        return cls(
            old_classes=tuple(d.get("old_classes", (1, 2, 3, 4, 5))),
            novel_classes=tuple(d.get("novel_classes", (6,))),
            rc_total=int(d.get("rc_total", 3)),
        )


@dataclass(frozen=True)
class InferenceSection:
    lambda_th: Optional[float] = None
    mc_passes: int = 10
    target_tpr: float = 0.95
    histogram_bins: int = 50

    def __post_init__(self):
        if not 0.0 < self.target_tpr < 1.0:
            raise ConfigError("target_tpr must lie strictly between 0 and 1")
        if self.mc_passes < 2:
            raise ConfigError("mc_passes must be at least 2")
        if self.histogram_bins < 2:
            raise ConfigError("histogram_bins must be at least 2")

    def to_json_dict(self) -> dict:
        return {
            "lambda_th": self.lambda_th,
            "mc_passes": self.mc_passes,
            "target_tpr": self.target_tpr,
            "histogram_bins": self.histogram_bins,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "InferenceSection":
        _reject_unknown(
            d, {"lambda_th", "mc_passes", "target_tpr", "histogram_bins"}, "inference"
        )
        raw = d.get("lambda_th")
        return cls(
            lambda_th=None if raw is None else float(raw),
            mc_passes=int(d.get("mc_passes", 10)),
            target_tpr=float(d.get("target_tpr", 0.95)),
            histogram_bins=int(d.get("histogram_bins", 50)),
        )


@dataclass(frozen=True)
class TrainingSection:
    closed_epochs: int = 60
    closed_lr: float = 3e-3
    oseg_epochs: int = 160
    oseg_lr: float = 6e-3
    oseg_backbone_scale: float = 0.0
    il_epochs: int = 8
    il_lr: Optional[float] = None  # default: 0.1 x oseg_lr
    baseline_epochs: int = 20
    baseline_lr: float = 3e-3

    def __post_init__(self):
        for name in ("closed_epochs", "oseg_epochs", "il_epochs", "baseline_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("closed_lr", "oseg_lr", "baseline_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.oseg_backbone_scale < 0:
            raise ConfigError("oseg_backbone_scale must be non-negative")
        if self.il_lr is not None and self.il_lr <= 0:
            raise ConfigError("il_lr must be positive")

    @property
    def effective_il_lr(self) -> float:
        return self.il_lr if self.il_lr is not None else 0.1 * self.oseg_lr

    def to_json_dict(self) -> dict:
        return {
            "closed_epochs": self.closed_epochs,
            "closed_lr": self.closed_lr,
            "oseg_epochs": self.oseg_epochs,
            "oseg_lr": self.oseg_lr,
            "oseg_backbone_scale": self.oseg_backbone_scale,
            "il_epochs": self.il_epochs,
            "il_lr": self.il_lr,
            "baseline_epochs": self.baseline_epochs,
            "baseline_lr": self.baseline_lr,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainingSection":
        _reject_unknown(
            d,
            {"closed_epochs", "closed_lr", "oseg_epochs", "oseg_lr",
             "oseg_backbone_scale", "il_epochs", "il_lr", "baseline_epochs",
             "baseline_lr"},
            "training",
        )
        raw_il = d.get("il_lr")
        return cls(
            closed_epochs=int(d.get("closed_epochs", 60)),
            closed_lr=float(d.get("closed_lr", 3e-3)),
            oseg_epochs=int(d.get("oseg_epochs", 160)),
            oseg_lr=float(d.get("oseg_lr", 6e-3)),
            oseg_backbone_scale=float(d.get("oseg_backbone_scale", 0.0)),
            il_epochs=int(d.get("il_epochs", 8)),
            il_lr=None if raw_il is None else float(raw_il),
            baseline_epochs=int(d.get("baseline_epochs", 20)),
            baseline_lr=float(d.get("baseline_lr", 3e-3)),
        )


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    dataset: DatasetSection = field(default_factory=DatasetSection)
    registry: RegistrySection = field(default_factory=RegistrySection)
    arch: ArchConfig = field(default_factory=ArchConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    inference: InferenceSection = field(default_factory=InferenceSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    output_dir: Optional[str] = None

    def __post_init__(self):
        registry = self.registry.build()
        if self.dataset.kind == "synthetic":
            scene_ids = {
                s.class_id
                for s in (
                    *self.dataset.scene.known_shape_classes,
                    *self.dataset.scene.novel_shape_classes,
                )
            }
            missing = scene_ids - registry.all_classes()
            if missing:
                raise ConfigError(
                    f"scene classes {sorted(missing)} missing from the registry"
                )
            scene_novel = self.dataset.scene.novel_class_ids
            if scene_novel - set(self.registry.novel_classes):
                raise ConfigError("scene novel classes must be registry novel classes")
        bad_syn = self.synthesis.source_classes - set(self.registry.old_classes)
        if bad_syn:
            raise ConfigError(
                f"synthesis source classes {sorted(bad_syn)} are not old classes"
            )

    def build_registry(self) -> ClassRegistry:
        return self.registry.build()

    def to_json_dict(self, include_output_dir: bool = True) -> dict:
        doc = {
            "seed": self.seed,
            "dataset": self.dataset.to_json_dict(),
            "registry": self.registry.to_json_dict(),
            "arch": self.arch.to_json_dict(),
            "synthesis": self.synthesis.to_json_dict(),
            "loss": self.loss.to_json_dict(),
            "inference": self.inference.to_json_dict(),
            "training": self.training.to_json_dict(),
        }
        if include_output_dir and self.output_dir is not None:
            doc["output_dir"] = self.output_dir
        return doc

    def canonical_json(self) -> str:
        """Path-free canonical form used for manifest signatures."""
        return json.dumps(
            self.to_json_dict(include_output_dir=False),
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json_dict(cls, d: dict) -> "ExperimentConfig":
        _reject_unknown(
            d,
            {"seed", "dataset", "registry", "arch", "synthesis", "loss",
             "inference", "training", "output_dir"},
            "experiment config",
        )
        if "seed" not in d:
            raise ConfigError("experiment config must set a seed")
        _reject_unknown(d.get("arch", {}), _ARCH_KEYS, "arch")
        _reject_unknown(d.get("synthesis", {}), _SYNTH_KEYS, "synthesis")
        _reject_unknown(d.get("loss", {}), _LOSS_KEYS, "loss")
        return cls(
            seed=int(d["seed"]),
            dataset=DatasetSection.from_json_dict(d.get("dataset", {})),
            registry=RegistrySection.from_json_dict(d.get("registry", {})),
            arch=ArchConfig.from_json_dict(d.get("arch", {})),
            synthesis=SynthesisConfig.from_json_dict(d.get("synthesis", {})),
            loss=LossConfig.from_json_dict(d.get("loss", {})),
            inference=InferenceSection.from_json_dict(d.get("inference", {})),
            training=TrainingSection.from_json_dict(d.get("training", {})),
            output_dir=d.get("output_dir"),
        )


def load_config(path: Path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    return ExperimentConfig.from_json_dict(doc)


def default_config(seed: int = 7, **overrides) -> ExperimentConfig:
    """The stock desk-scale experiment used by tests and examples."""
    return ExperimentConfig(seed=seed, **overrides)
