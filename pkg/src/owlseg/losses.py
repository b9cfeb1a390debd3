"""Training objectives: cross-entropy, synthesis loss, calibration loss.

All losses reduce by unweighted mean over non-void points and are evaluated
on assembled score vectors (unknown entry at index 0) except the closed
stage, which trains on ``y_old`` alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .core import (
    UNKNOWN_ID,
    ClassRegistry,
    ConfigError,
    DomainError,
    LogitsBundle,
    NumericError,
)
from .network import PointSegmenter, Stage, assemble_scores


@dataclass(frozen=True)
class LossConfig:
    lambda_syn: float = 1.0
    lambda_cal: float = 0.1

    def __post_init__(self):
        if self.lambda_syn < 0 or self.lambda_cal < 0:
            raise ConfigError("loss weights must be non-negative")

    def to_json_dict(self) -> dict:
        return {"lambda_syn": self.lambda_syn, "lambda_cal": self.lambda_cal}

    @classmethod
    def from_json_dict(cls, d: dict) -> "LossConfig":
        return cls(
            lambda_syn=float(d.get("lambda_syn", 1.0)),
            lambda_cal=float(d.get("lambda_cal", 0.1)),
        )


def cross_entropy(
    scores: torch.Tensor,
    targets: torch.Tensor,
    void_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Mean of -log softmax(scores)[target] over non-void rows."""
    if scores.ndim != 2:
        raise DomainError("cross_entropy expects a (k, d) score matrix")
    if targets.shape != scores.shape[:1]:
        raise DomainError("targets length must match scores")
    if ((targets < 0) | (targets >= scores.shape[1])).any():
        raise DomainError("targets must lie in [0, d)")
    if void_mask is not None:
        keep = ~void_mask
        if not keep.any():
            raise DomainError("all points are void; loss undefined")
        scores = scores[keep]
        targets = targets[keep]
    elif scores.shape[0] == 0:
        raise DomainError("empty batch; loss undefined")
    log_norm = torch.logsumexp(scores, dim=1)
    picked = scores.gather(1, targets.unsqueeze(1)).squeeze(1)
    return (log_norm - picked).mean()


def synthesis_loss(
    bundle: LogitsBundle, syn_mask: np.ndarray, stage: Stage
) -> torch.Tensor:
    """Cross-entropy of assembled scores on synthesized points toward class 0.

    Empty synthesized set contributes an exact zero (and zero gradient).
    """
    syn_mask = np.asarray(syn_mask, dtype=bool)
    if syn_mask.shape != (bundle.num_points,):
        raise DomainError("syn_mask length must match the bundle")
    if not syn_mask.any():
        return torch.zeros((), dtype=torch.float64)
    assembled = assemble_scores(bundle, stage)[torch.from_numpy(np.flatnonzero(syn_mask))]
    targets = torch.zeros(assembled.shape[0], dtype=torch.int64)
    return cross_entropy(assembled, targets)


def _remove_column(assembled: torch.Tensor, col: torch.Tensor) -> torch.Tensor:
    """Drop one column per row; later columns shift left to fill the gap."""
    k, d = assembled.shape
    base = torch.arange(d - 1).expand(k, d - 1)
    idx = base + (base >= col.unsqueeze(1)).to(torch.int64)
    return assembled.gather(1, idx)


def calibration_loss(
    bundle: LogitsBundle,
    stage: Stage,
    registry: ClassRegistry,
    labels: np.ndarray,
    cfg: LossConfig,
    void_mask: Optional[np.ndarray] = None,
    allow_unknown_labels: bool = False,
) -> torch.Tensor:
    """Calibration objective on ground-truth (non-synthesized) points.

    First term: plain cross-entropy of the assembled vector against the
    label. Second term (weight ``lambda_cal``): cross-entropy of the
    assembled vector with the label's own entry removed, target = unknown
    entry, which pushes every known point's runner-up mass onto the unknown
    class. Points labeled unknown (pseudo labels during IL) take part in the
    first term only; their entry is the unknown one, which is never removed.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (bundle.num_points,):
        raise DomainError("labels length must match the bundle")
    if void_mask is None:
        void_mask = np.zeros(labels.shape, dtype=bool)
    void_mask = np.asarray(void_mask, dtype=bool)
    keep = ~void_mask
    if not keep.any():
        raise DomainError("all points are void; loss undefined")
    if not allow_unknown_labels and (labels[keep] == UNKNOWN_ID).any():
        raise DomainError("unknown labels are valid only for IL pseudo-label training")

    assembled = assemble_scores(bundle, stage)
    idx = torch.from_numpy(np.flatnonzero(keep))
    assembled = assembled[idx]
    targets = torch.from_numpy(registry.assembled_index(labels[keep]))

    loss_ori = cross_entropy(assembled, targets)
    if cfg.lambda_cal == 0.0:
        return loss_ori

    known = targets > 0
    if not known.any():
        return loss_ori
    reduced = _remove_column(assembled[known], targets[known])
    uk_targets = torch.zeros(reduced.shape[0], dtype=torch.int64)
    return loss_ori + cfg.lambda_cal * cross_entropy(reduced, uk_targets)


def closed_loss(
    bundle: LogitsBundle,
    registry: ClassRegistry,
    labels: np.ndarray,
    void_mask: Optional[np.ndarray] = None,
) -> torch.Tensor:
    """Stage-one objective: cross-entropy over old-class logits only."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (bundle.num_points,):
        raise DomainError("labels length must match the bundle")
    if void_mask is None:
        void_mask = np.zeros(labels.shape, dtype=bool)
    keep = ~np.asarray(void_mask, dtype=bool)
    if not keep.any():
        raise DomainError("all points are void; loss undefined")
    old_index = {c: i for i, c in enumerate(registry.old_classes)}
    kept = labels[keep]
    bad = set(np.unique(kept).tolist()) - set(old_index)
    if bad:
        raise DomainError(f"labels {sorted(bad)} are not old classes")
    targets = torch.from_numpy(np.vectorize(old_index.__getitem__)(kept).astype(np.int64))
    return cross_entropy(bundle.y_old[torch.from_numpy(np.flatnonzero(keep))], targets)


def total_loss(
    bundle: LogitsBundle,
    stage: Stage,
    registry: ClassRegistry,
    labels: np.ndarray,
    syn_mask: np.ndarray,
    cfg: LossConfig,
    void_mask: Optional[np.ndarray] = None,
    allow_unknown_labels: bool = False,
) -> torch.Tensor:
    """Combined objective: calibration on real points + weighted synthesis.

    ``labels``/``void_mask`` describe the real points; synthesized points are
    excluded from the calibration term and train toward the unknown class.
    """
    if stage is Stage.CLOSED:
        raise DomainError("combined loss applies to open and post-IL stages")
    syn_mask = np.asarray(syn_mask, dtype=bool)
    if void_mask is None:
        void_mask = np.zeros(syn_mask.shape, dtype=bool)
    cal_void = np.asarray(void_mask, dtype=bool) | syn_mask
    loss = calibration_loss(
        bundle, stage, registry, labels, cfg,
        void_mask=cal_void, allow_unknown_labels=allow_unknown_labels,
    )
    if cfg.lambda_syn != 0.0:
        loss = loss + cfg.lambda_syn * synthesis_loss(bundle, syn_mask, stage)
    return loss


def gradients(
    model: PointSegmenter, loss_fn: Callable[[], torch.Tensor]
) -> dict[str, torch.Tensor]:
    """Evaluate a loss closure and return gradients for every parameter.

    Parameters the loss never touches get explicit zeros; any non-finite
    gradient aborts with the parameter named.
    """
    model.zero_grad(set_to_none=True)
    loss = loss_fn()
    if loss.ndim != 0:
        raise DomainError("loss closure must return a scalar")
    if not torch.isfinite(loss):
        raise NumericError("loss is non-finite")
    loss.backward()
    out: dict[str, torch.Tensor] = {}
    for name, param in model.named_parameters():
        grad = param.grad
        if grad is None:
            grad = torch.zeros_like(param)
        if not torch.isfinite(grad).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        out[name] = grad.detach().clone()
    model.zero_grad(set_to_none=True)
    return out
