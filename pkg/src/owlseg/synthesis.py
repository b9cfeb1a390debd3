"""Unknown-object synthesis by resizing known instances.

Selected instances are rescaled about their centroid by a factor drawn from
two disjoint bands (shrink or enlarge), which pushes them off the natural
size distribution of their class. The resized copies replace the originals
in the scan and their points get synthetic-unknown targets during training.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import ClassRegistry, ConfigError, DomainError, Scan


@dataclass(frozen=True)
class SynthesisConfig:
    """Controls which instances get resized and by how much.

    ``source_classes`` holds the known class IDs eligible for resizing;
    each eligible instance is picked independently with ``select_prob``.
    The scale factor is uniform on [shrink_lo, shrink_hi] or
    [enlarge_lo, enlarge_hi], fair coin between the two bands.
    """

    source_classes: frozenset[int] = frozenset({5})
    select_prob: float = 0.5
    shrink_lo: float = 0.25
    shrink_hi: float = 0.5
    enlarge_lo: float = 1.5
    enlarge_hi: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "source_classes", frozenset(self.source_classes))
        if not 0.0 <= self.select_prob <= 1.0:
            raise ConfigError("select_prob must lie in [0, 1]")
        if not 0.0 < self.shrink_lo <= self.shrink_hi:
            raise ConfigError("shrink band must satisfy 0 < lo <= hi")
        if not 0.0 < self.enlarge_lo <= self.enlarge_hi:
            raise ConfigError("enlarge band must satisfy 0 < lo <= hi")
        if self.shrink_hi >= self.enlarge_lo:
            raise ConfigError("shrink and enlarge bands must be disjoint")

    def to_json_dict(self) -> dict:
        return {
            "source_classes": sorted(self.source_classes),
            "select_prob": self.select_prob,
            "shrink_lo": self.shrink_lo,
            "shrink_hi": self.shrink_hi,
            "enlarge_lo": self.enlarge_lo,
            "enlarge_hi": self.enlarge_hi,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SynthesisConfig":
        return cls(
            source_classes=frozenset(d.get("source_classes", [5])),
            select_prob=float(d.get("select_prob", 0.5)),
            shrink_lo=float(d.get("shrink_lo", 0.25)),
            shrink_hi=float(d.get("shrink_hi", 0.5)),
            enlarge_lo=float(d.get("enlarge_lo", 1.5)),
            enlarge_hi=float(d.get("enlarge_hi", 3.0)),
        )


def draw_resize_factor(cfg: SynthesisConfig, rng: np.random.Generator) -> float:
    """One scale factor: fair coin between the shrink and enlarge bands."""
    if rng.uniform() < 0.5:
        return float(rng.uniform(cfg.shrink_lo, cfg.shrink_hi))
    return float(rng.uniform(cfg.enlarge_lo, cfg.enlarge_hi))


def resize_instance(points: np.ndarray, factor: float) -> np.ndarray:
    """Rescale an instance about its centroid.

    The centroid is invariant and all pairwise distances scale by exactly
    ``factor``.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] == 0:
        raise DomainError("resize expects a non-empty (n, 3) point array")
    if not np.isfinite(points).all():
        raise DomainError("resize expects finite coordinates")
    if not (np.isfinite(factor) and factor > 0):
        raise DomainError("resize factor must be positive and finite")
    centroid = points.mean(axis=0)
    return centroid + factor * (points - centroid)


@dataclass(frozen=True)
class SynthesisResult:
    """Scan with resized instances swapped in, plus bookkeeping.

    ``synthetic_mask`` flags the points whose instance was resized; those
    points train toward the unknown class. ``selected`` maps instance ID to
    the factor applied.
    """

    scan: Scan
    synthetic_mask: np.ndarray
    selected: dict[int, float]


def _instance_class(labels: np.ndarray) -> int:
    """Class of an instance = majority label, ties to the lowest ID.

    Ground-truth instances are single-label; pseudo-labeled ones during
    incremental training may carry a few stray points.
    """
    values, counts = np.unique(labels, return_counts=True)
    return int(values[np.argmax(counts)])


def apply_synthesis(
    scan: Scan,
    labels: np.ndarray,
    cfg: SynthesisConfig,
    rng: np.random.Generator,
    registry: Optional[ClassRegistry] = None,
) -> SynthesisResult:
    """Resize a random subset of eligible instances in place in the scan.

    Eligible instances have a positive instance ID and carry one of
    ``cfg.source_classes``. Each is selected independently with probability
    ``select_prob``; the original points are replaced by their resized
    versions so the synthetic objects are the only copy. Non-selected
    points are bitwise unchanged.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (scan.num_points,):
        raise DomainError("labels length must match the scan")
    if registry is not None:
        outside = cfg.source_classes - registry.known_classes()
        if outside:
            raise DomainError(
                f"synthesis source classes {sorted(outside)} are not known classes"
            )

    points = scan.points.copy()
    mask = np.zeros(scan.num_points, dtype=bool)
    selected: dict[int, float] = {}

    candidates = np.unique(scan.instance_ids[
        (scan.instance_ids > 0) & np.isin(labels, sorted(cfg.source_classes))
    ])
    for inst in candidates.tolist():
        idx = scan.instance_ids == inst
        if _instance_class(labels[idx]) not in cfg.source_classes:
            continue
        if rng.uniform() >= cfg.select_prob:
            continue
        factor = draw_resize_factor(cfg, rng)
        points[idx] = resize_instance(points[idx], factor)
        mask[idx] = True
        selected[int(inst)] = factor

    out = replace(scan, points=points) if selected else scan
    return SynthesisResult(scan=out, synthetic_mask=mask, selected=selected)
