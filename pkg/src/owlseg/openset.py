"""Open-set scoring and inference, plus the classic uncertainty baselines.

Every scoring method returns one real number per point, oriented so higher
means more likely unknown. Inference thresholds the unknown-slot confidence:
points at or above the threshold get label 0, the rest keep their closed-set
prediction.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import torch

from .core import (
    UNKNOWN_ID,
    ConfigError,
    DomainError,
    FormatError,
    LabelDomain,
    LabelSet,
    Scan,
    derive_seed,
)
from .network import PointSegmenter, Stage

SCORING_METHODS = ("real", "msp", "maxlogit", "mcdropout")


@dataclass(frozen=True)
class InferenceConfig:
    lambda_th: Optional[float] = None
    mc_passes: int = 10
    scoring_method: str = "real"

    def __post_init__(self):
        if self.scoring_method not in SCORING_METHODS:
            raise ConfigError(f"unknown scoring method {self.scoring_method!r}")
        if self.scoring_method == "mcdropout" and self.mc_passes < 2:
            raise ConfigError("mcdropout needs at least 2 passes")
        if self.mc_passes < 1:
            raise ConfigError("mc_passes must be positive")

    def to_json_dict(self) -> dict:
        return {
            "lambda_th": self.lambda_th,
            "mc_passes": self.mc_passes,
            "scoring_method": self.scoring_method,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "InferenceConfig":
        raw = d.get("lambda_th")
        return cls(
            lambda_th=None if raw is None else float(raw),
            mc_passes=int(d.get("mc_passes", 10)),
            scoring_method=d.get("scoring_method", "real"),
        )


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def unknown_score(
    model: PointSegmenter,
    scan: Scan,
    cfg: InferenceConfig,
    rng: Optional[torch.Generator] = None,
) -> np.ndarray:
    """Per-point unknownness score under ``cfg.scoring_method``."""
    method = cfg.scoring_method
    if method == "real":
        if model.stage is Stage.CLOSED:
            raise DomainError("closed-stage models have no unknown slots to score")
        with torch.no_grad():
            bundle = model(scan)
        return bundle.y_uk.numpy().max(axis=1)

    if method == "mcdropout":
        if model.arch.dropout_rate <= 0.0:
            raise ConfigError("mcdropout needs a model with a positive dropout rate")
        if rng is None:
            rng = torch.Generator().manual_seed(derive_seed("mcdropout", scan.num_points))
        with torch.no_grad():
            mean_probs = np.zeros((scan.num_points, model.registry.num_old))
            for _ in range(cfg.mc_passes):
                bundle = model(scan, dropout_on=True, rng=rng)
                mean_probs += _softmax_np(bundle.y_old.numpy())
        mean_probs /= cfg.mc_passes
        return -(mean_probs * np.log(mean_probs)).sum(axis=1)

    with torch.no_grad():
        y_old = model(scan).y_old.numpy()
    if method == "msp":
        return 1.0 - _softmax_np(y_old).max(axis=1)
    if method == "maxlogit":
        return -y_old.max(axis=1)
    raise ConfigError(f"unknown scoring method {method!r}")


def _argmax_lowest_class(scores: np.ndarray, class_ids: tuple[int, ...]) -> np.ndarray:
    """Per-row class ID with the highest score; ties go to the lowest ID."""
    ids = np.asarray(class_ids, dtype=np.int64)
    top = scores.max(axis=1, keepdims=True)
    candidates = np.where(scores == top, ids, np.iinfo(np.int64).max)
    return candidates.min(axis=1)


def predict_closed(model: PointSegmenter, scan: Scan) -> LabelSet:
    """Closed-set prediction from the normal head alone; works at any stage."""
    with torch.no_grad():
        y_old = model(scan).y_old.numpy()
    labels = _argmax_lowest_class(y_old, model.registry.old_classes)
    return LabelSet(labels=labels, domain=LabelDomain.CLOSED_OLD)


def _closed_part(model: PointSegmenter, scan: Scan) -> np.ndarray:
    """Known-class prediction: old head, plus novel slots after IL."""
    with torch.no_grad():
        bundle = model(scan)
    reg = model.registry
    if model.stage is Stage.POST_IL and bundle.y_nv is not None:
        scores = np.concatenate([bundle.y_old.numpy(), bundle.y_nv.numpy()], axis=1)
        ids = (*reg.old_classes, *reg.learned_novel)
    else:
        scores = bundle.y_old.numpy()
        ids = reg.old_classes
    return _argmax_lowest_class(scores, ids)


def predict_open(model: PointSegmenter, scan: Scan, cfg: InferenceConfig) -> LabelSet:
    """Threshold rule: unknown-slot confidence >= lambda_th -> label 0."""
    if model.stage is Stage.CLOSED:
        raise DomainError("open prediction needs an open or post-IL model")
    if cfg.lambda_th is None:
        raise ConfigError("lambda_th is not set; calibrate or configure a threshold")
    conf = unknown_score(model, scan, replace(cfg, scoring_method="real"))
    closed = _closed_part(model, scan)
    labels = np.where(conf >= cfg.lambda_th, UNKNOWN_ID, closed)
    domain = LabelDomain.POST_IL if model.stage is Stage.POST_IL else LabelDomain.OPEN
    return LabelSet(labels=labels, domain=domain)


def calibrate_threshold(known_scores: np.ndarray, target_tpr: float) -> float:
    """Pick the threshold leaving ~``target_tpr`` of known points below it."""
    known_scores = np.asarray(known_scores, dtype=np.float64)
    if known_scores.size == 0:
        raise DomainError("cannot calibrate a threshold on an empty sample")
    if not 0.0 < target_tpr < 1.0:
        raise DomainError("target_tpr must lie strictly between 0 and 1")
    return float(np.percentile(known_scores, target_tpr * 100.0))


# --- score dumps --------------------------------------------------------------

SCORE_DUMP_MAGIC = b"OWSC"
SCORE_DUMP_VERSION = 1
_RECORD = struct.Struct("<Idii")
CSV_HEADER = ("point_index", "score", "pred_label", "gt_label")


def _check_dump_args(scores, pred_labels, gt_labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    pred = np.asarray(pred_labels, dtype=np.int64)
    gt = np.asarray(gt_labels, dtype=np.int64)
    if not scores.shape == pred.shape == gt.shape or scores.ndim != 1:
        raise DomainError("score dump arrays must be equal-length 1-D")
    return scores, pred, gt


def encode_scores_csv(scores, pred_labels, gt_labels) -> str:
    scores, pred, gt = _check_dump_args(scores, pred_labels, gt_labels)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for i in range(scores.size):
        writer.writerow((i, repr(float(scores[i])), int(pred[i]), int(gt[i])))
    return buf.getvalue()


def encode_scores_binary(scores, pred_labels, gt_labels) -> bytes:
    scores, pred, gt = _check_dump_args(scores, pred_labels, gt_labels)
    out = bytearray()
    out += SCORE_DUMP_MAGIC
    out += struct.pack("<IQ", SCORE_DUMP_VERSION, scores.size)
    for i in range(scores.size):
        out += _RECORD.pack(i, float(scores[i]), int(pred[i]), int(gt[i]))
    return bytes(out)


def decode_scores_binary(data: bytes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of encode_scores_binary; returns (scores, pred, gt)."""
    head = len(SCORE_DUMP_MAGIC) + struct.calcsize("<IQ")
    if len(data) < head or data[:4] != SCORE_DUMP_MAGIC:
        raise FormatError("not a score dump stream")
    version, count = struct.unpack_from("<IQ", data, 4)
    if version != SCORE_DUMP_VERSION:
        raise FormatError(f"unsupported score dump version {version}")
    if len(data) != head + count * _RECORD.size:
        raise FormatError("score dump stream is truncated")
    scores = np.empty(count, dtype=np.float64)
    pred = np.empty(count, dtype=np.int64)
    gt = np.empty(count, dtype=np.int64)
    for i in range(count):
        idx, s, p, g = _RECORD.unpack_from(data, head + i * _RECORD.size)
        if idx != i:
            raise FormatError(f"score dump record {i} carries index {idx}")
        scores[i], pred[i], gt[i] = s, p, g
    return scores, pred, gt
