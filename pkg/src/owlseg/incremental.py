"""Incremental learning: pseudo-label generation, stage training, post-IL
inference, and the naive baselines that forget old classes.

A stage promotes one novel class: the registry advances, one redundancy slot
is rebound to the class, and training runs on the union of the new ground
truth with pseudo labels predicted by the pre-stage open model. The pseudo
labels are hard labels, generated once and frozen for the stage.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .core import (
    UNKNOWN_ID,
    ConfigError,
    DomainError,
    LabelDomain,
    LabelSet,
    Scan,
)
from .data import DatasetSample
from .losses import LossConfig, cross_entropy, total_loss
from .network import PointSegmenter, Stage
from .core import derive_seed
from .openset import InferenceConfig, _closed_part, predict_open
from .synthesis import SynthesisConfig, apply_synthesis
from .training import train_steps


@dataclass(frozen=True)
class ILStagePlan:
    """One incremental stage: which class arrives and the training budget."""

    promoted_class: int
    epochs: int = 5
    lr: float = 1e-4
    source_checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.promoted_class <= 0:
            raise ConfigError("promoted_class must be a positive class ID")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")


def extract_novel_gt(full_labels: LabelSet, promoted_class: int) -> LabelSet:
    """The stage's annotation: the promoted class only, all else void."""
    mask = full_labels.labels == promoted_class
    labels = np.where(mask, promoted_class, UNKNOWN_ID)
    return LabelSet(labels=labels, domain=LabelDomain.FULL, void_mask=~mask)


def make_pseudo_labels(
    model_o: PointSegmenter,
    scan: Scan,
    novel_gt: LabelSet,
    cfg: InferenceConfig,
) -> LabelSet:
    """Union of stage ground truth with the open model's predictions.

    Annotated points keep their novel label; every other point takes the
    open prediction, including label 0 where the model flags unknown. The
    result is total: no void points remain.
    """
    if model_o.stage is Stage.CLOSED:
        raise DomainError("pseudo labels come from an open or post-IL model")
    if novel_gt.num_points != scan.num_points:
        raise DomainError("novel_gt length must match the scan")
    given = ~novel_gt.void_mask
    reg = model_o.registry
    novel_ids = set(np.unique(novel_gt.labels[given]).tolist())
    if novel_ids - reg.remaining_novel:
        raise DomainError(
            f"stage annotation carries non-novel labels {sorted(novel_ids - reg.remaining_novel)}"
        )
    if len(novel_ids) > 1:
        raise DomainError("one stage introduces exactly one novel class")

    open_pred = predict_open(model_o, scan, cfg)
    merged = np.where(given, novel_gt.labels, open_pred.labels)
    return LabelSet(labels=merged, domain=LabelDomain.POST_IL)


def predict_post_il(model: PointSegmenter, scan: Scan) -> LabelSet:
    """Closed-set prediction over old plus learned novel classes.

    Unknown slots are excluded; on an open-stage model this equals the plain
    closed prediction.
    """
    if model.stage is Stage.CLOSED:
        raise DomainError("post-IL prediction needs a redundancy head")
    labels = _closed_part(model, scan)
    domain = (
        LabelDomain.POST_IL if model.stage is Stage.POST_IL else LabelDomain.CLOSED_OLD
    )
    return LabelSet(labels=labels, domain=domain)


def run_il_stage(
    model: PointSegmenter,
    samples: Sequence[DatasetSample],
    pseudo_labels: Sequence[LabelSet],
    syn_cfg: SynthesisConfig,
    loss_cfg: LossConfig,
    epochs: int,
    lr: float,
    seed: int,
) -> list[float]:
    """Train the reassigned model on the frozen pseudo-label union.

    Synthesis stays active exactly as in open-set finetuning; unknown
    pseudo labels are legal targets here and keep the open-set property.
    """
    if model.stage is not Stage.POST_IL:
        raise DomainError("advance the registry and reassign slots before IL training")
    if len(pseudo_labels) != len(samples):
        raise DomainError("one pseudo-label set per sample is required")
    for ls in pseudo_labels:
        if ls.void_mask.any():
            raise DomainError("pseudo-label unions must be total (void-free)")

    def step(epoch: int, idx: int, sample: DatasetSample) -> torch.Tensor:
        labels = pseudo_labels[idx].labels
        rng = np.random.default_rng(derive_seed(seed, "il-syn", epoch, idx))
        result = apply_synthesis(sample.scan, labels, syn_cfg, rng, registry=model.registry)
        bundle = model(result.scan)
        return total_loss(
            bundle, model.stage, model.registry, labels, result.synthetic_mask,
            loss_cfg, allow_unknown_labels=True,
        )

    return train_steps(model, samples, step, epochs, lr)


def _known_head_loss(
    model: PointSegmenter, scan: Scan, novel_gt: LabelSet
) -> torch.Tensor:
    """Cross-entropy over [y_old, y_nv] on the annotated points only."""
    bundle = model(scan)
    scores = torch.cat([bundle.y_old, bundle.y_nv], dim=1)
    reg = model.registry
    ids = (*reg.old_classes, *reg.learned_novel)
    index = {c: i for i, c in enumerate(ids)}
    keep = np.flatnonzero(~novel_gt.void_mask)
    if keep.size == 0:
        raise DomainError("stage annotation is empty for this scan")
    targets = torch.from_numpy(
        np.array([index[int(c)] for c in novel_gt.labels[keep]], dtype=np.int64)
    )
    return cross_entropy(scores[torch.from_numpy(keep)], targets)


def baseline_finetune(
    model: PointSegmenter,
    samples: Sequence[DatasetSample],
    novel_gts: Sequence[LabelSet],
    epochs: int,
    lr: float,
) -> list[float]:
    """Naive finetuning on the new annotation alone: all parameters train on
    novel points only, no pseudo labels, no synthesis. Collapses onto the
    promoted class."""
    if model.stage is not Stage.POST_IL:
        raise DomainError("baselines start from the reassigned post-IL model")
    if len(novel_gts) != len(samples):
        raise DomainError("one annotation set per sample is required")

    def step(epoch: int, idx: int, sample: DatasetSample) -> torch.Tensor:
        return _known_head_loss(model, sample.scan, novel_gts[idx])

    return train_steps(model, samples, step, epochs, lr)


def baseline_feature_extraction(
    model: PointSegmenter,
    samples: Sequence[DatasetSample],
    novel_gts: Sequence[LabelSet],
    epochs: int,
    lr: float,
) -> list[float]:
    """Frozen-extractor baseline: only the promoted class's slot trains.

    Everything except that one redundancy-head row (and its bias entry)
    stays bitwise unchanged.
    """
    if model.stage is not Stage.POST_IL:
        raise DomainError("baselines start from the reassigned post-IL model")
    if len(novel_gts) != len(samples):
        raise DomainError("one annotation set per sample is required")
    promoted_slots = list(model.registry.novel_slots)
    row_mask = torch.zeros_like(model.g_re.weight)
    bias_mask = torch.zeros_like(model.g_re.bias)
    row_mask[promoted_slots] = 1.0
    bias_mask[promoted_slots] = 1.0

    trace: list[float] = []
    if epochs == 0:
        return trace
    opt = torch.optim.Adam([model.g_re.weight, model.g_re.bias], lr=lr)
    for epoch in range(epochs):
        total = 0.0
        for idx, sample in enumerate(samples):
            opt.zero_grad(set_to_none=True)
            loss = _known_head_loss(model, sample.scan, novel_gts[idx])
            loss.backward()
            # confine the update to the promoted slots
            with torch.no_grad():
                if model.g_re.weight.grad is not None:
                    model.g_re.weight.grad *= row_mask
                if model.g_re.bias.grad is not None:
                    model.g_re.bias.grad *= bias_mask
            opt.step()
            total += float(loss.detach())
        trace.append(total / len(samples))
    return trace
