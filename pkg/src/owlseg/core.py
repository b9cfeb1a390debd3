"""Core domain types for open-world LIDAR segmentation.

Semantic class IDs are positive integers; ID 0 is reserved for the unknown
class and is never a regular class. All types here are immutable values:
updates happen by constructing new instances.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

UNKNOWN_ID = 0


def derive_seed(*parts) -> int:
    """Fold arbitrary labels into a 63-bit seed, stable across runs."""
    import hashlib

    text = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


class OpenWorldError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(OpenWorldError):
    """Malformed binary stream or file."""


class DomainError(OpenWorldError):
    """A value lies outside its declared domain (labels, stages, classes)."""


class ConfigError(OpenWorldError):
    """Invalid or incomplete configuration."""


class NumericError(OpenWorldError):
    """A non-finite value appeared where a finite one is required."""


class GenerationError(OpenWorldError):
    """Synthetic scene generation could not satisfy the request."""


class LabelDomain(Enum):
    """Declared domain of a per-point label array."""

    CLOSED_OLD = "closed-old"  # old classes only; 0 is not a valid label
    OPEN = "open"              # old classes plus the unknown label 0
    POST_IL = "post-il"        # unknown + old + learned novel classes
    FULL = "full"              # everything the dataset knows (evaluation GT)


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ClassRegistry:
    """Evolving partition of class IDs into old, learned-novel and
    remaining-novel sets, plus redundancy-slot bookkeeping.

    ``rc_total`` counts every redundancy slot, assigned or not. Slots bound
    to a learned novel class are recorded in ``rc_assigned`` as
    ``(slot_index, class_id)`` pairs in promotion order; all other slot
    indices stay dedicated to the unknown class.
    """

    old_classes: tuple[int, ...]
    learned_novel: tuple[int, ...] = ()
    remaining_novel: frozenset[int] = frozenset()
    rc_total: int = 3
    rc_assigned: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        old = tuple(int(c) for c in self.old_classes)
        learned = tuple(int(c) for c in self.learned_novel)
        remaining = frozenset(int(c) for c in self.remaining_novel)
        object.__setattr__(self, "old_classes", old)
        object.__setattr__(self, "learned_novel", learned)
        object.__setattr__(self, "remaining_novel", remaining)
        object.__setattr__(
            self, "rc_assigned", tuple((int(s), int(c)) for s, c in self.rc_assigned)
        )

        for cid in (*old, *learned, *remaining):
            if cid <= 0:
                raise DomainError(f"class IDs must be positive integers, got {cid}")
        sets = [set(old), set(learned), set(remaining)]
        if len(old) != len(sets[0]) or len(learned) != len(sets[1]):
            raise DomainError("duplicate class IDs within a partition")
        for i in range(3):
            for j in range(i + 1, 3):
                overlap = sets[i] & sets[j]
                if overlap:
                    raise DomainError(f"class partitions overlap on {sorted(overlap)}")
        if not old:
            raise DomainError("at least one old class is required")
        if self.rc_total < 1:
            raise DomainError("rc_total must be >= 1")

        slots = [s for s, _ in self.rc_assigned]
        classes = [c for _, c in self.rc_assigned]
        if len(set(slots)) != len(slots):
            raise DomainError("redundancy slots assigned more than once")
        if set(classes) != set(learned) or len(classes) != len(learned):
            raise DomainError("rc_assigned must map slots onto learned_novel exactly")
        if any(s < 0 or s >= self.rc_total for s in slots):
            raise DomainError("assigned slot index out of range")
        if self.rc_total - len(learned) <= 0:
            raise DomainError("no redundancy slot left for the unknown class")

    @property
    def num_old(self) -> int:
        return len(self.old_classes)

    @property
    def num_novel(self) -> int:
        return len(self.learned_novel)

    @property
    def unknown_slots(self) -> tuple[int, ...]:
        """Slot indices still dedicated to the unknown class, ascending."""
        taken = {s for s, _ in self.rc_assigned}
        return tuple(s for s in range(self.rc_total) if s not in taken)

    @property
    def novel_slots(self) -> tuple[int, ...]:
        """Assigned slot indices ordered like ``learned_novel``."""
        by_class = {c: s for s, c in self.rc_assigned}
        return tuple(by_class[c] for c in self.learned_novel)

    @property
    def assembled_classes(self) -> tuple[int, ...]:
        """Class IDs in assembled-score column order: unknown, old, novel."""
        return (UNKNOWN_ID, *self.old_classes, *self.learned_novel)

    def known_classes(self) -> frozenset[int]:
        return frozenset(self.old_classes) | frozenset(self.learned_novel)

    def all_classes(self) -> frozenset[int]:
        return self.known_classes() | self.remaining_novel

    def domain_classes(self, domain: LabelDomain) -> frozenset[int]:
        if domain is LabelDomain.CLOSED_OLD:
            return frozenset(self.old_classes)
        if domain is LabelDomain.OPEN:
            return frozenset((UNKNOWN_ID, *self.old_classes))
        if domain is LabelDomain.POST_IL:
            return frozenset((UNKNOWN_ID, *self.old_classes, *self.learned_novel))
        return self.all_classes() | {UNKNOWN_ID}

    def assembled_index(self, labels: np.ndarray) -> np.ndarray:
        """Map class IDs to assembled-score column indices.

        Raises DomainError for IDs that have no assembled column (remaining
        novel classes included; they are never training targets).
        """
        labels = np.asarray(labels, dtype=np.int64)
        order = self.assembled_classes
        lut = np.full(max(order) + 1, -1, dtype=np.int64)
        for idx, cid in enumerate(order):
            lut[cid] = idx
        bad = (labels < 0) | (labels >= lut.shape[0])
        if not bad.any():
            mapped = lut[labels]
            bad = mapped < 0
            if not bad.any():
                return mapped
        offenders = np.unique(labels[bad] if bad.any() else labels)
        raise DomainError(f"labels outside assembled domain: {offenders.tolist()[:8]}")

    def to_json_dict(self) -> dict:
        return {
            "old_classes": list(self.old_classes),
            "learned_novel": list(self.learned_novel),
            "remaining_novel": sorted(self.remaining_novel),
            "rc_total": self.rc_total,
            "rc_assigned": [list(p) for p in self.rc_assigned],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ClassRegistry":
        return cls(
            old_classes=tuple(d["old_classes"]),
            learned_novel=tuple(d["learned_novel"]),
            remaining_novel=frozenset(d["remaining_novel"]),
            rc_total=int(d["rc_total"]),
            rc_assigned=tuple((int(s), int(c)) for s, c in d["rc_assigned"]),
        )


def registry_advance(reg: ClassRegistry, promoted: Sequence[int]) -> ClassRegistry:
    """Promote classes from remaining-novel to learned-novel.

    Each promoted class consumes the lowest free redundancy slot, and one
    fresh unknown-dedicated slot is appended so the unknown slot count
    stays constant. Promoting an empty list returns ``reg`` unchanged.
    """
    promoted = [int(c) for c in promoted]
    if not promoted:
        return reg
    if len(set(promoted)) != len(promoted):
        raise DomainError("duplicate class IDs in promotion")

    learned = list(reg.learned_novel)
    remaining = set(reg.remaining_novel)
    assigned = list(reg.rc_assigned)
    rc_total = reg.rc_total
    for cid in promoted:
        if cid == UNKNOWN_ID:
            raise DomainError("the unknown class cannot be promoted")
        if cid in reg.old_classes or cid in learned:
            raise DomainError(f"class {cid} is already known")
        if cid not in remaining:
            raise DomainError(f"class {cid} is not a remaining novel class")
        taken = {s for s, _ in assigned}
        free = [s for s in range(rc_total) if s not in taken]
        slot = free[0]
        assigned.append((slot, cid))
        learned.append(cid)
        remaining.remove(cid)
        rc_total += 1  # replenish: keep the unknown slot count constant

    return ClassRegistry(
        old_classes=reg.old_classes,
        learned_novel=tuple(learned),
        remaining_novel=frozenset(remaining),
        rc_total=rc_total,
        rc_assigned=tuple(assigned),
    )


@dataclass(frozen=True)
class Scan:
    """One LIDAR frame: M points with optional intensity and instance IDs."""

    points: np.ndarray                    # (M, 3) float64, meters
    intensity: Optional[np.ndarray] = None  # (M,) float64 in [0, 1]
    instance_ids: Optional[np.ndarray] = None  # (M,) int64, 0 = no instance

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DomainError(f"points must be (M, 3), got {pts.shape}")
        if pts.shape[0] == 0:
            raise DomainError("a scan must contain at least one point")
        if not np.isfinite(pts).all():
            raise DomainError("scan coordinates must be finite")
        object.__setattr__(self, "points", _readonly(pts))

        m = pts.shape[0]
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64)
            if inten.shape != (m,):
                raise DomainError("intensity length must match point count")
            if not np.isfinite(inten).all():
                raise DomainError("intensity must be finite")
            object.__setattr__(self, "intensity", _readonly(inten))

        ids = self.instance_ids
        ids = np.zeros(m, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        if ids.shape != (m,):
            raise DomainError("instance_ids length must match point count")
        if (ids < 0).any():
            raise DomainError("instance IDs must be non-negative")
        object.__setattr__(self, "instance_ids", _readonly(ids))

    @property
    def num_points(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class LabelSet:
    """Per-point semantic labels in a declared domain, with a void mask."""

    labels: np.ndarray              # (M,) int64
    domain: LabelDomain
    void_mask: Optional[np.ndarray] = None  # (M,) bool, True = ignore

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or labels.shape[0] == 0:
            raise DomainError("labels must be a non-empty 1-D array")
        object.__setattr__(self, "labels", _readonly(labels))
        void = self.void_mask
        void = np.zeros(labels.shape, dtype=bool) if void is None else np.asarray(void, dtype=bool)
        if void.shape != labels.shape:
            raise DomainError("void_mask length must match labels")
        object.__setattr__(self, "void_mask", _readonly(void))
        if not isinstance(self.domain, LabelDomain):
            raise DomainError(f"unknown label domain {self.domain!r}")

    @property
    def num_points(self) -> int:
        return self.labels.shape[0]

    def validate_against(self, registry: ClassRegistry) -> None:
        """Check every non-void label lies in the declared domain."""
        allowed = registry.domain_classes(self.domain)
        live = self.labels[~self.void_mask]
        bad = ~np.isin(live, sorted(allowed))
        if bad.any():
            offenders = np.unique(live[bad])
            raise DomainError(
                f"labels {offenders.tolist()[:8]} outside domain {self.domain.value}"
            )


@dataclass(frozen=True)
class LogitsBundle:
    """Raw per-point scores from the segmentation heads.

    ``y_uk``/``y_nv`` are None for stages where the matching heads do not
    exist (closed stage has no redundancy head; open stage has no assigned
    novel slots).
    """

    y_old: torch.Tensor                 # (M, C)
    y_uk: Optional[torch.Tensor] = None  # (M, r) unknown-dedicated slots
    y_nv: Optional[torch.Tensor] = None  # (M, n) assigned novel slots

    def __post_init__(self):
        if self.y_old.ndim != 2:
            raise DomainError("y_old must be (M, C)")
        m = self.y_old.shape[0]
        for name, t in (("y_uk", self.y_uk), ("y_nv", self.y_nv)):
            if t is not None and (t.ndim != 2 or t.shape[0] != m):
                raise DomainError(f"{name} must be (M, k) with matching M")

    @property
    def num_points(self) -> int:
        return self.y_old.shape[0]

    def check_against(self, registry: ClassRegistry) -> None:
        if self.y_old.shape[1] != registry.num_old:
            raise DomainError("y_old width does not match the registry")
        if self.y_uk is not None and self.y_uk.shape[1] != len(registry.unknown_slots):
            raise DomainError("y_uk width does not match unknown slot count")
        if self.y_nv is not None and self.y_nv.shape[1] != registry.num_novel:
            raise DomainError("y_nv width does not match learned novel count")
