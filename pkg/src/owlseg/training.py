"""Shared training loops and pooled inference helpers.

One optimizer step per scan, scans visited in dataset order, so a run is a
pure function of (initial weights, data, seed). Synthesis randomness comes
from a seed derived per (epoch, scan), never from global state.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .core import (
    ClassRegistry,
    DomainError,
    LabelDomain,
    LabelSet,
    NumericError,
    derive_seed,
)
from .data import DatasetSample
from .losses import LossConfig, closed_loss, total_loss
from .network import PointSegmenter, Stage
from .openset import InferenceConfig, predict_closed, predict_open, unknown_score
from .synthesis import SynthesisConfig, apply_synthesis

StepFn = Callable[[int, int, DatasetSample], torch.Tensor]


def train_steps(
    model: PointSegmenter,
    samples: Sequence[DatasetSample],
    loss_for_sample: StepFn,
    epochs: int,
    lr: float,
    params: Optional[list] = None,
) -> list[float]:
    """Adam over per-scan losses; returns the mean loss per epoch.

    ``params`` may be a plain parameter list or Adam-style group dicts.
    """
    if not samples:
        raise DomainError("training needs at least one scan")
    if epochs == 0:
        return []
    opt = torch.optim.Adam(params if params is not None else model.parameters(), lr=lr)
    trace = []
    for epoch in range(epochs):
        total = 0.0
        for idx, sample in enumerate(samples):
            opt.zero_grad(set_to_none=True)
            loss = loss_for_sample(epoch, idx, sample)
            if not torch.isfinite(loss):
                raise NumericError(
                    f"training diverged at epoch {epoch}, scan {sample.name}"
                )
            loss.backward()
            opt.step()
            total += float(loss.detach())
        trace.append(total / len(samples))
    return trace


def train_closed_model(
    model: PointSegmenter,
    samples: Sequence[DatasetSample],
    epochs: int,
    lr: float,
) -> list[float]:
    """Plain cross-entropy on old classes; novel points stay void."""
    if model.stage is not Stage.CLOSED:
        raise DomainError("closed training expects a closed-stage model")

    def step(epoch: int, idx: int, sample: DatasetSample) -> torch.Tensor:
        bundle = model(sample.scan)
        return closed_loss(
            bundle, model.registry, sample.train_labels.labels,
            void_mask=sample.train_labels.void_mask,
        )

    return train_steps(model, samples, step, epochs, lr)


def train_oseg_model(
    model: PointSegmenter,
    samples: Sequence[DatasetSample],
    syn_cfg: SynthesisConfig,
    loss_cfg: LossConfig,
    epochs: int,
    lr: float,
    seed: int,
    backbone_lr_scale: float = 0.0,
) -> list[float]:
    """Calibration + synthesis objective on an open-stage model.

    The redundancy head trains at ``lr``; every other parameter trains at
    ``lr * backbone_lr_scale``. A scale of zero keeps the extractor and the
    known-class head bitwise identical to the closed model, so closed-set
    predictions survive the finetune untouched.
    """
    if model.stage is not Stage.OPEN:
        raise DomainError("open-set finetuning expects an open-stage model")
    if backbone_lr_scale < 0.0:
        raise DomainError("backbone_lr_scale must be non-negative")

    head = list(model.g_re.parameters())
    if backbone_lr_scale == 0.0:
        params: list = head
    else:
        head_ids = {id(p) for p in head}
        rest = [p for p in model.parameters() if id(p) not in head_ids]
        params = [
            {"params": head, "lr": lr},
            {"params": rest, "lr": lr * backbone_lr_scale},
        ]

    def step(epoch: int, idx: int, sample: DatasetSample) -> torch.Tensor:
        rng = np.random.default_rng(derive_seed(seed, "syn", epoch, idx))
        result = apply_synthesis(sample.scan, sample.train_labels.labels, syn_cfg, rng)
        bundle = model(result.scan)
        return total_loss(
            bundle, model.stage, model.registry,
            sample.train_labels.labels, result.synthetic_mask, loss_cfg,
            void_mask=sample.train_labels.void_mask,
        )

    return train_steps(model, samples, step, epochs, lr, params=params)


# --- pooled inference over a dataset split -----------------------------------

def pool_labelsets(labelsets: Sequence[LabelSet]) -> LabelSet:
    """Concatenate per-scan label sets of one shared domain."""
    if not labelsets:
        raise DomainError("nothing to pool")
    domains = {ls.domain for ls in labelsets}
    if len(domains) != 1:
        raise DomainError(f"cannot pool mixed label domains {sorted(d.value for d in domains)}")
    return LabelSet(
        labels=np.concatenate([ls.labels for ls in labelsets]),
        domain=labelsets[0].domain,
        void_mask=np.concatenate([ls.void_mask for ls in labelsets]),
    )


def predict_pooled(
    model: PointSegmenter,
    samples: Sequence[DatasetSample],
    open_inference: bool = False,
    cfg: Optional[InferenceConfig] = None,
) -> LabelSet:
    """Closed or open predictions across scans, concatenated in order."""
    preds = []
    for sample in samples:
        if open_inference:
            preds.append(predict_open(model, sample.scan, cfg))
        else:
            preds.append(predict_closed(model, sample.scan))
    return pool_labelsets(preds)


def pooled_full_labels(samples: Sequence[DatasetSample]) -> LabelSet:
    return pool_labelsets([s.full_labels for s in samples])


def unknown_mask(gt: LabelSet, registry: ClassRegistry) -> np.ndarray:
    """True where the ground-truth class is not known to the registry."""
    known = sorted(registry.known_classes())
    return ~np.isin(gt.labels, known)


def score_pooled(
    model: PointSegmenter,
    samples: Sequence[DatasetSample],
    cfg: InferenceConfig,
    seed: int = 0,
) -> np.ndarray:
    """Unknown scores across scans; each scan gets a private dropout stream."""
    chunks = []
    for sample in samples:
        rng = torch.Generator().manual_seed(derive_seed(seed, "mc", sample.name))
        chunks.append(unknown_score(model, sample.scan, cfg, rng=rng))
    return np.concatenate(chunks)
