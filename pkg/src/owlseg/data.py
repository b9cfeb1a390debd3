"""Scan/label binary IO and the parametric synthetic scene generator.

File formats
------------
Scan files: consecutive little-endian float32 records (x, y, z, remission),
16 bytes per point. Label files: one little-endian uint32 per point, low 16
bits semantic class, high 16 bits instance ID.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (
    UNKNOWN_ID,
    ClassRegistry,
    ConfigError,
    DomainError,
    FormatError,
    GenerationError,
    LabelDomain,
    LabelSet,
    Scan,
)

SCAN_RECORD_BYTES = 16
LABEL_RECORD_BYTES = 4
SEMANTIC_MASK = 0xFFFF


def read_scan(data: bytes) -> Scan:
    """Parse a raw scan stream into a Scan (instance IDs all zero)."""
    if len(data) % SCAN_RECORD_BYTES != 0:
        raise FormatError(
            f"scan stream length {len(data)} is not a multiple of {SCAN_RECORD_BYTES}"
        )
    if len(data) == 0:
        raise FormatError("scan stream is empty")
    arr = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    if not np.isfinite(arr).all():
        raise FormatError("scan stream contains non-finite values")
    return Scan(
        points=arr[:, :3].astype(np.float64),
        intensity=arr[:, 3].astype(np.float64),
    )


def write_scan(scan: Scan) -> bytes:
    """Serialize a Scan to the raw binary layout (float32, little endian)."""
    m = scan.num_points
    out = np.empty((m, 4), dtype="<f4")
    out[:, :3] = scan.points
    out[:, 3] = 0.0 if scan.intensity is None else scan.intensity
    return out.tobytes()


def read_labels(
    data: bytes,
    expected_points: int,
    domain: LabelDomain = LabelDomain.CLOSED_OLD,
    zero_is_void: Optional[bool] = None,
) -> tuple[LabelSet, np.ndarray]:
    """Parse a label stream into (LabelSet, instance IDs).

    In the closed-old domain the semantic value 0 marks a void point by
    default; in the other domains 0 is the unknown label itself.
    """
    if len(data) != LABEL_RECORD_BYTES * expected_points:
        raise FormatError(
            f"label stream has {len(data)} bytes, expected "
            f"{LABEL_RECORD_BYTES * expected_points} for {expected_points} points"
        )
    words = np.frombuffer(data, dtype="<u4")
    semantic = (words & SEMANTIC_MASK).astype(np.int64)
    instances = (words >> 16).astype(np.int64)
    if zero_is_void is None:
        zero_is_void = domain is LabelDomain.CLOSED_OLD
    void = semantic == 0 if zero_is_void else np.zeros(semantic.shape, dtype=bool)
    return LabelSet(labels=semantic, domain=domain, void_mask=void), instances


def write_labels(labels: np.ndarray, instance_ids: Optional[np.ndarray] = None) -> bytes:
    """Pack semantic labels and instance IDs into the uint32 layout."""
    labels = np.asarray(labels, dtype=np.int64)
    if instance_ids is None:
        instance_ids = np.zeros(labels.shape, dtype=np.int64)
    instance_ids = np.asarray(instance_ids, dtype=np.int64)
    if instance_ids.shape != labels.shape:
        raise DomainError("instance_ids length must match labels")
    if (labels < 0).any() or (labels > SEMANTIC_MASK).any():
        raise DomainError("semantic labels must fit in 16 bits")
    if (instance_ids < 0).any() or (instance_ids > SEMANTIC_MASK).any():
        raise DomainError("instance IDs must fit in 16 bits")
    words = (instance_ids.astype(np.uint32) << 16) | labels.astype(np.uint32)
    return words.astype("<u4").tobytes()


# --- synthetic scenes -------------------------------------------------------

SHAPE_KINDS = ("ground", "box", "cylinder", "ellipsoid")


@dataclass(frozen=True)
class ShapeSpec:
    """One object archetype: geometry kind plus per-axis extent ranges.

    ``size_min``/``size_max`` are full extents (box edge lengths, cylinder
    diameter/diameter/height, ellipsoid diameters). Ground ignores sizes and
    covers the whole scene extent.
    """

    name: str
    class_id: int
    kind: str
    size_min: tuple[float, float, float] = (1.0, 1.0, 1.0)
    size_max: tuple[float, float, float] = (1.0, 1.0, 1.0)
    count_min: int = 1
    count_max: int = 1

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ConfigError(f"unknown shape kind {self.kind!r}")
        if self.class_id <= 0:
            raise ConfigError("shape class IDs must be positive")
        lo = np.asarray(self.size_min, dtype=np.float64)
        hi = np.asarray(self.size_max, dtype=np.float64)
        if (lo <= 0).any() or (hi < lo).any():
            raise ConfigError(f"invalid size range for shape {self.name!r}")
        if self.count_min < 0 or self.count_max < self.count_min:
            raise ConfigError(f"invalid count range for shape {self.name!r}")

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "class_id": self.class_id,
            "kind": self.kind,
            "size_min": list(self.size_min),
            "size_max": list(self.size_max),
            "count_min": self.count_min,
            "count_max": self.count_max,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ShapeSpec":
        return cls(
            name=d["name"],
            class_id=int(d["class_id"]),
            kind=d["kind"],
            size_min=tuple(d.get("size_min", (1.0, 1.0, 1.0))),
            size_max=tuple(d.get("size_max", (1.0, 1.0, 1.0))),
            count_min=int(d.get("count_min", 1)),
            count_max=int(d.get("count_max", 1)),
        )


@dataclass(frozen=True)
class SceneConfig:
    points_per_scan: int = 4096
    known_shape_classes: tuple[ShapeSpec, ...] = ()
    novel_shape_classes: tuple[ShapeSpec, ...] = ()
    rng_seed: int = 0
    scene_extent: float = 40.0
    noise_sigma: float = 0.02
    ground_fraction: float = 0.4
    min_object_points: int = 30

    def __post_init__(self):
        object.__setattr__(self, "known_shape_classes", tuple(self.known_shape_classes))
        object.__setattr__(self, "novel_shape_classes", tuple(self.novel_shape_classes))
        if self.points_per_scan < 1:
            raise ConfigError("points_per_scan must be positive")
        if self.scene_extent <= 0:
            raise ConfigError("scene_extent must be positive")
        known_ids = {s.class_id for s in self.known_shape_classes}
        novel_ids = {s.class_id for s in self.novel_shape_classes}
        if known_ids & novel_ids:
            raise ConfigError("known and novel archetypes must use disjoint class IDs")
        if not any(s.kind == "ground" for s in self.known_shape_classes):
            raise ConfigError("scene needs a ground archetype among the known shapes")

    @property
    def novel_class_ids(self) -> frozenset[int]:
        return frozenset(s.class_id for s in self.novel_shape_classes)

    def to_json_dict(self) -> dict:
        return {
            "points_per_scan": self.points_per_scan,
            "known_shape_classes": [s.to_json_dict() for s in self.known_shape_classes],
            "novel_shape_classes": [s.to_json_dict() for s in self.novel_shape_classes],
            "rng_seed": self.rng_seed,
            "scene_extent": self.scene_extent,
            "noise_sigma": self.noise_sigma,
            "ground_fraction": self.ground_fraction,
            "min_object_points": self.min_object_points,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SceneConfig":
        return cls(
            points_per_scan=int(d.get("points_per_scan", 4096)),
            known_shape_classes=tuple(
                ShapeSpec.from_json_dict(s) for s in d.get("known_shape_classes", [])
            ),
            novel_shape_classes=tuple(
                ShapeSpec.from_json_dict(s) for s in d.get("novel_shape_classes", [])
            ),
            rng_seed=int(d.get("rng_seed", 0)),
            scene_extent=float(d.get("scene_extent", 40.0)),
            noise_sigma=float(d.get("noise_sigma", 0.02)),
            ground_fraction=float(d.get("ground_fraction", 0.4)),
            min_object_points=int(d.get("min_object_points", 30)),
        )


def default_scene_config(**overrides) -> SceneConfig:
    """Desk-scale default scene: ground, buildings, cars, pedestrians, and
    bushes as known classes, plus a novel blob class of mid-size ellipsoids.

    The blob's size band coincides with bushes enlarged 1.5-3x, so instance
    resizing of the bush class genuinely rehearses the unknown."""
    known = (
        ShapeSpec("ground", 1, "ground"),
        ShapeSpec("building", 2, "box", (6.0, 6.0, 3.5), (10.0, 10.0, 6.0), 1, 2),
        ShapeSpec("car", 3, "box", (3.6, 1.6, 1.4), (4.8, 2.0, 1.8), 2, 4),
        ShapeSpec("pedestrian", 4, "cylinder", (0.5, 0.5, 1.5), (0.8, 0.8, 1.9), 2, 4),
        ShapeSpec("bush", 5, "ellipsoid", (1.2, 1.2, 1.0), (2.0, 2.0, 1.6), 2, 4),
    )
    novel = (
        ShapeSpec("blob", 6, "ellipsoid", (2.4, 2.4, 2.0), (4.8, 4.8, 4.0), 1, 2),
    )
    base = dict(
        points_per_scan=2048,
        known_shape_classes=known,
        novel_shape_classes=novel,
        scene_extent=40.0,
    )
    base.update(overrides)
    return SceneConfig(**base)


@dataclass
class _SceneObject:
    spec: ShapeSpec
    center: np.ndarray  # (3,)
    size: np.ndarray    # (3,) full extents
    yaw: float
    instance_id: int

    @property
    def footprint_radius(self) -> float:
        return 0.5 * math.hypot(self.size[0], self.size[1])

    def surface_area(self) -> float:
        sx, sy, sz = self.size
        if self.spec.kind == "box":
            return 2.0 * (sx * sy + sy * sz + sx * sz)
        if self.spec.kind == "cylinder":
            r, h = 0.5 * sx, sz
            return 2.0 * math.pi * r * h + 2.0 * math.pi * r * r
        # ellipsoid: Thomsen approximation, plenty for point budgeting
        a, b, c = 0.5 * sx, 0.5 * sy, 0.5 * sz
        p = 1.6075
        s = ((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3.0
        return 4.0 * math.pi * s ** (1.0 / p)


def _rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _sample_box(rng: np.random.Generator, size: np.ndarray, n: int) -> np.ndarray:
    """Uniform-by-area samples on the surface of an axis-aligned box."""
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 2))
    pts = np.empty((n, 3))
    for f in range(6):
        m = faces == f
        if not m.any():
            continue
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        other = [a for a in range(3) if a != axis]
        pts[m, axis] = sign * 0.5 * size[axis]
        pts[m, other[0]] = u[m, 0] * size[other[0]]
        pts[m, other[1]] = u[m, 1] * size[other[1]]
    return pts


def _sample_cylinder(rng: np.random.Generator, size: np.ndarray, n: int) -> np.ndarray:
    """Uniform-by-area samples on a closed vertical cylinder."""
    r, h = 0.5 * size[0], size[2]
    lateral = 2.0 * math.pi * r * h
    cap = math.pi * r * r
    part = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    pts = np.empty((n, 3))
    lat = part == 0
    pts[lat, 0] = r * np.cos(theta[lat])
    pts[lat, 1] = r * np.sin(theta[lat])
    pts[lat, 2] = rng.uniform(-0.5, 0.5, size=int(lat.sum())) * h
    for which, sign in ((1, 1.0), (2, -1.0)):
        m = part == which
        if not m.any():
            continue
        rad = r * np.sqrt(rng.uniform(0.0, 1.0, size=int(m.sum())))
        pts[m, 0] = rad * np.cos(theta[m])
        pts[m, 1] = rad * np.sin(theta[m])
        pts[m, 2] = sign * 0.5 * h
    return pts


def _sample_ellipsoid(rng: np.random.Generator, size: np.ndarray, n: int) -> np.ndarray:
    """Uniform-by-area samples on an ellipsoid surface via rejection."""
    a, b, c = 0.5 * size[0], 0.5 * size[1], 0.5 * size[2]
    m_max = max(a * b, b * c, a * c)
    out = np.empty((0, 3))
    while out.shape[0] < n:
        k = max(2 * (n - out.shape[0]), 64)
        u = rng.normal(size=(k, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        weight = np.sqrt(
            (b * c * u[:, 0]) ** 2 + (a * c * u[:, 1]) ** 2 + (a * b * u[:, 2]) ** 2
        )
        keep = rng.uniform(0.0, m_max, size=k) < weight
        out = np.concatenate([out, u[keep] * np.array([a, b, c])])
    return out[:n]


_SAMPLERS = {"box": _sample_box, "cylinder": _sample_cylinder, "ellipsoid": _sample_ellipsoid}


def _place_objects(
    cfg: SceneConfig, rng: np.random.Generator
) -> list[_SceneObject]:
    objects: list[_SceneObject] = []
    next_instance = 1
    half = 0.5 * cfg.scene_extent
    specs = [
        s
        for s in (*cfg.known_shape_classes, *cfg.novel_shape_classes)
        if s.kind != "ground"
    ]
    for spec in specs:
        count = int(rng.integers(spec.count_min, spec.count_max + 1))
        for _ in range(count):
            size = rng.uniform(np.asarray(spec.size_min), np.asarray(spec.size_max))
            yaw = float(rng.uniform(0.0, 2.0 * math.pi))
            radius = 0.5 * math.hypot(size[0], size[1])
            if radius >= half:
                raise GenerationError(
                    f"scene extent {cfg.scene_extent} too small for {spec.name}"
                )
            placed = False
            for _ in range(100):
                xy = rng.uniform(-half + radius, half - radius, size=2)
                ok = all(
                    np.hypot(*(xy - o.center[:2])) > radius + o.footprint_radius
                    for o in objects
                )
                if ok:
                    center = np.array([xy[0], xy[1], 0.5 * size[2]])
                    objects.append(_SceneObject(spec, center, size, yaw, next_instance))
                    next_instance += 1
                    placed = True
                    break
            if not placed:
                raise GenerationError(
                    f"could not place {spec.name} without overlap; extent too small"
                )
    return objects


def _allocate_points(cfg: SceneConfig, objects: list[_SceneObject]) -> tuple[int, list[int]]:
    total = cfg.points_per_scan
    if not objects:
        return total, []
    ground_n = int(round(cfg.ground_fraction * total))
    budget = total - ground_n
    if budget < cfg.min_object_points * len(objects):
        raise GenerationError("not enough points for the requested object count")
    areas = np.array([o.surface_area() for o in objects])
    raw = areas / areas.sum() * budget
    counts = np.maximum(raw.astype(int), cfg.min_object_points)
    # largest-remainder style trim/pad to hit the budget exactly
    while counts.sum() > budget:
        i = int(np.argmax(counts))
        counts[i] -= 1
    while counts.sum() < budget:
        i = int(np.argmin(counts / np.maximum(raw, 1e-9)))
        counts[i] += 1
    return ground_n, counts.tolist()


def generate_scene(
    cfg: SceneConfig, registry: ClassRegistry, seed: Optional[int] = None
) -> tuple[Scan, LabelSet, LabelSet]:
    """Generate one synthetic scan.

    Returns (scan, training labels, full labels): the training labels mark
    points of novel archetypes void, the full labels keep them for
    evaluation. Instance IDs are unique per object; ground points carry 0.
    """
    scene_ids = {s.class_id for s in (*cfg.known_shape_classes, *cfg.novel_shape_classes)}
    unregistered = scene_ids - registry.all_classes()
    if unregistered:
        raise ConfigError(f"scene classes {sorted(unregistered)} missing from registry")

    rng = np.random.default_rng(cfg.rng_seed if seed is None else seed)
    objects = _place_objects(cfg, rng)
    ground_n, counts = _allocate_points(cfg, objects)

    ground_spec = next(s for s in cfg.known_shape_classes if s.kind == "ground")
    half = 0.5 * cfg.scene_extent
    chunks, labels, instances = [], [], []
    if ground_n > 0:
        g = np.zeros((ground_n, 3))
        g[:, :2] = rng.uniform(-half, half, size=(ground_n, 2))
        chunks.append(g)
        labels.append(np.full(ground_n, ground_spec.class_id, dtype=np.int64))
        instances.append(np.zeros(ground_n, dtype=np.int64))

    for obj, n in zip(objects, counts):
        local = _SAMPLERS[obj.spec.kind](rng, obj.size, n)
        pts = local @ _rot_z(obj.yaw).T + obj.center
        chunks.append(pts)
        labels.append(np.full(n, obj.spec.class_id, dtype=np.int64))
        instances.append(np.full(n, obj.instance_id, dtype=np.int64))

    points = np.concatenate(chunks)
    points += rng.normal(0.0, cfg.noise_sigma, size=points.shape)
    semantic = np.concatenate(labels)
    instance_ids = np.concatenate(instances)
    intensity = rng.uniform(0.0, 1.0, size=points.shape[0])

    perm = rng.permutation(points.shape[0])
    points, semantic, instance_ids, intensity = (
        points[perm], semantic[perm], instance_ids[perm], intensity[perm]
    )

    scan = Scan(points=points, intensity=intensity, instance_ids=instance_ids)
    full = LabelSet(labels=semantic, domain=LabelDomain.FULL)
    novel_ids = cfg.novel_class_ids
    void = np.isin(semantic, sorted(novel_ids)) if novel_ids else np.zeros(semantic.shape, bool)
    train_labels = np.where(void, UNKNOWN_ID, semantic)
    train = LabelSet(labels=train_labels, domain=LabelDomain.CLOSED_OLD, void_mask=void)
    return scan, train, full


# --- dataset on disk --------------------------------------------------------

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class DatasetSample:
    name: str
    scan: Scan
    train_labels: LabelSet
    full_labels: LabelSet


def split_seeds(base_seed: int, n_train: int, n_val: int) -> tuple[list[int], list[int]]:
    """Scene seeds split by parity: even seeds train, odd seeds validate."""
    even_start = base_seed if base_seed % 2 == 0 else base_seed + 1
    train = [even_start + 2 * i for i in range(n_train)]
    val = [even_start + 1 + 2 * i for i in range(n_val)]
    return train, val


def save_dataset(
    cfg: SceneConfig,
    registry: ClassRegistry,
    out_dir: Path,
    train_seeds: Sequence[int],
    val_seeds: Sequence[int],
) -> dict:
    """Materialize scenes as binary scan/label files plus a JSON manifest."""
    out_dir = Path(out_dir)
    for sub in ("velodyne", "labels", "labels_full"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    entries = {"train": [], "val": []}
    index = 0
    for split, seeds in (("train", train_seeds), ("val", val_seeds)):
        for seed in seeds:
            scan, train_lab, full_lab = generate_scene(cfg, registry, seed=seed)
            name = f"{index:06d}"
            (out_dir / "velodyne" / f"{name}.bin").write_bytes(write_scan(scan))
            (out_dir / "labels" / f"{name}.label").write_bytes(
                write_labels(train_lab.labels, scan.instance_ids)
            )
            (out_dir / "labels_full" / f"{name}.label").write_bytes(
                write_labels(full_lab.labels, scan.instance_ids)
            )
            entries[split].append({"name": name, "seed": seed})
            index += 1

    manifest = {
        "format_version": 1,
        "scene_config": cfg.to_json_dict(),
        "registry": registry.to_json_dict(),
        "scenes": entries,
    }
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    return manifest


def load_dataset(data_dir: Path, split: str) -> list[DatasetSample]:
    """Load one split of a materialized dataset back through the binary IO."""
    data_dir = Path(data_dir)
    manifest_path = data_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise ConfigError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if split not in manifest["scenes"]:
        raise ConfigError(f"unknown split {split!r}")
    novel_ids = {
        s["class_id"] for s in manifest["scene_config"]["novel_shape_classes"]
    }
    samples = []
    for entry in manifest["scenes"][split]:
        name = entry["name"]
        scan = read_scan((data_dir / "velodyne" / f"{name}.bin").read_bytes())
        train_lab, inst = read_labels(
            (data_dir / "labels" / f"{name}.label").read_bytes(),
            scan.num_points,
            domain=LabelDomain.CLOSED_OLD,
        )
        full_lab, _ = read_labels(
            (data_dir / "labels_full" / f"{name}.label").read_bytes(),
            scan.num_points,
            domain=LabelDomain.FULL,
            zero_is_void=False,
        )
        scan = replace(scan, instance_ids=inst)
        samples.append(DatasetSample(name, scan, train_lab, full_lab))
    return samples
