"""Small builders shared across test modules."""

import numpy as np
import torch

from owlseg.core import ClassRegistry, Scan
from owlseg.network import ArchConfig, PointSegmenter, Stage


def make_scan(n: int = 64, seed: int = 0, extent: float = 12.0,
              with_instances: bool = False) -> Scan:
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-extent / 2, extent / 2, size=(n, 3))
    pts[:, 2] = rng.uniform(0.0, 3.0, size=n)
    inten = rng.uniform(0.0, 1.0, size=n)
    inst = rng.integers(0, 4, size=n) if with_instances else None
    return Scan(points=pts, intensity=inten, instance_ids=inst)


def small_registry(novel: bool = False) -> ClassRegistry:
    """3 old classes; with ``novel`` one learned class bound to slot 1."""
    if novel:
        return ClassRegistry(
            old_classes=(1, 2, 3), learned_novel=(7,),
            remaining_novel=frozenset({8}), rc_total=4, rc_assigned=((1, 7),),
        )
    return ClassRegistry(old_classes=(1, 2, 3), remaining_novel=frozenset({7, 8}))


def small_model(stage: Stage = Stage.OPEN, seed: int = 3, hidden: int = 12,
                dropout: float = 0.3, registry: ClassRegistry = None) -> PointSegmenter:
    reg = registry if registry is not None else small_registry(stage is Stage.POST_IL)
    arch = ArchConfig(hidden_width=hidden, dropout_rate=dropout)
    return PointSegmenter(reg, arch, seed, stage)


def zero_params(model: PointSegmenter) -> PointSegmenter:
    """Zero every parameter so head biases alone determine the logits."""
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model


def set_bias(layer: torch.nn.Linear, values) -> None:
    with torch.no_grad():
        layer.bias.copy_(torch.tensor(values, dtype=torch.float64))


def params_snapshot(model: PointSegmenter) -> dict:
    return {k: v.detach().clone() for k, v in model.named_parameters()}


def params_equal(a: dict, b: dict) -> bool:
    return set(a) == set(b) and all(torch.equal(a[k], b[k]) for k in a)


def tiny_scene_samples(n: int = 2, seed: int = 0, points: int = 320):
    """Generated desk-scale scenes: old classes (1, 2, 5), novel class 6.

    Returns (registry, samples); every scene contains exactly one novel blob.
    """
    from owlseg.data import DatasetSample, SceneConfig, ShapeSpec, generate_scene

    registry = ClassRegistry(old_classes=(1, 2, 5), remaining_novel=frozenset({6}))
    cfg = SceneConfig(
        points_per_scan=points,
        known_shape_classes=(
            ShapeSpec("ground", 1, "ground"),
            ShapeSpec("crate", 2, "box", (2.0, 2.0, 2.0), (3.0, 3.0, 3.0), 1, 2),
            ShapeSpec("bush", 5, "ellipsoid", (1.2, 1.2, 1.0), (2.0, 2.0, 1.6), 1, 2),
        ),
        novel_shape_classes=(
            ShapeSpec("blob", 6, "ellipsoid", (2.4, 2.4, 2.0), (4.0, 4.0, 3.2), 1, 1),
        ),
        scene_extent=30.0,
        min_object_points=20,
    )
    samples = [
        DatasetSample(f"{i:06d}", *generate_scene(cfg, registry, seed=seed + 2 * i))
        for i in range(n)
    ]
    return registry, samples
