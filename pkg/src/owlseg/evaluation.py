"""Evaluation metrics: known-vs-unknown ranking metrics, mIoU splits, and
score-distribution histograms.

AUROC/AUPR treat the unknown class as the positive class. mIoU averages
per-class IoU = TP/(TP+FP+FN); classes absent from both prediction and
ground truth are dropped from the average. Metrics pool points over the
whole evaluation set rather than averaging per scan.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import UNKNOWN_ID, ClassRegistry, DomainError, LabelSet


def _binary_inputs(scores, is_unknown) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    is_unknown = np.asarray(is_unknown, dtype=bool)
    if scores.ndim != 1 or scores.shape != is_unknown.shape:
        raise DomainError("scores and is_unknown must be equal-length 1-D arrays")
    return scores, is_unknown


def auroc(scores, is_unknown) -> float:
    """Probability a random unknown point outscores a random known point.

    Ties count one half (Mann-Whitney U statistic, computed from average
    ranks in O(N log N)).
    """
    scores, is_unknown = _binary_inputs(scores, is_unknown)
    n_pos = int(is_unknown.sum())
    n_neg = scores.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DomainError("auroc needs both known and unknown points")

    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    rank_sum = ranks[is_unknown].sum()
    u_stat = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


def aupr(scores, is_unknown) -> float:
    """Area under precision-recall with unknown as the positive class.

    Thresholds sweep the distinct scores in descending order; the area is
    the step sum of precision times recall increments.
    """
    scores, is_unknown = _binary_inputs(scores, is_unknown)
    n_pos = int(is_unknown.sum())
    if n_pos == 0:
        raise DomainError("aupr needs at least one unknown point")

    order = np.argsort(-scores, kind="mergesort")
    pos_sorted = is_unknown[order].astype(np.float64)
    score_sorted = scores[order]
    cum_tp = np.cumsum(pos_sorted)
    taken = np.arange(1, scores.size + 1, dtype=np.float64)
    # evaluate only at the last index of each tied-score block
    block_end = np.append(score_sorted[1:] != score_sorted[:-1], True)
    precision = cum_tp[block_end] / taken[block_end]
    recall = cum_tp[block_end] / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


@dataclass(frozen=True)
class HistogramRecord:
    """Aligned binned score counts for known and unknown points."""

    bin_edges: tuple[float, ...]
    count_known: tuple[int, ...]
    count_unknown: tuple[int, ...]

    def to_json_dict(self) -> dict:
        return {
            "bin_edges": list(self.bin_edges),
            "count_known": list(self.count_known),
            "count_unknown": list(self.count_unknown),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "HistogramRecord":
        return cls(
            bin_edges=tuple(float(x) for x in d["bin_edges"]),
            count_known=tuple(int(x) for x in d["count_known"]),
            count_unknown=tuple(int(x) for x in d["count_unknown"]),
        )


def export_histogram(scores, is_unknown, bins: int = 50) -> HistogramRecord:
    """Bin the two score populations over one shared edge grid."""
    scores, is_unknown = _binary_inputs(scores, is_unknown)
    if bins < 2:
        raise DomainError("histogram needs at least 2 bins")
    edges = np.histogram_bin_edges(scores, bins=bins)
    count_unknown, _ = np.histogram(scores[is_unknown], bins=edges)
    count_known, _ = np.histogram(scores[~is_unknown], bins=edges)
    return HistogramRecord(
        bin_edges=tuple(float(e) for e in edges),
        count_known=tuple(int(c) for c in count_known),
        count_unknown=tuple(int(c) for c in count_unknown),
    )


def histogram_to_csv(rec: HistogramRecord) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("bin_left", "bin_right", "count_known", "count_unknown"))
    for i in range(len(rec.count_known)):
        writer.writerow(
            (
                repr(rec.bin_edges[i]),
                repr(rec.bin_edges[i + 1]),
                rec.count_known[i],
                rec.count_unknown[i],
            )
        )
    return buf.getvalue()


@dataclass(frozen=True)
class EvalReport:
    """Confusion-matrix derived segmentation metrics plus optional
    open-set ranking metrics and score histogram."""

    class_ids: tuple[int, ...]
    confusion: tuple[tuple[int, ...], ...]
    iou_per_class: dict[int, float]
    miou: float
    miou_old: float
    miou_novel: float
    auroc: Optional[float] = None
    aupr: Optional[float] = None
    histogram: Optional[HistogramRecord] = None
    score_stats: Optional[dict[str, float]] = None

    def to_json_dict(self) -> dict:
        doc = {
            "class_ids": list(self.class_ids),
            "confusion": [list(row) for row in self.confusion],
            "iou_per_class": {str(k): v for k, v in sorted(self.iou_per_class.items())},
            "miou": self.miou,
            "miou_old": self.miou_old,
            "miou_novel": self.miou_novel,
        }
        if self.auroc is not None:
            doc["auroc"] = self.auroc
        if self.aupr is not None:
            doc["aupr"] = self.aupr
        if self.histogram is not None:
            doc["histogram"] = self.histogram.to_json_dict()
        if self.score_stats is not None:
            doc["score_stats"] = dict(sorted(self.score_stats.items()))
        return doc


EVAL_REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["class_ids", "confusion", "iou_per_class", "miou", "miou_old", "miou_novel"],
    "properties": {
        "class_ids": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "confusion": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        },
        "iou_per_class": {
            "type": "object",
            "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1},
        },
        "miou": {"type": "number", "minimum": 0, "maximum": 1},
        "miou_old": {"type": "number", "minimum": 0, "maximum": 1},
        "miou_novel": {"type": "number", "minimum": 0, "maximum": 1},
        "auroc": {"type": "number", "minimum": 0, "maximum": 1},
        "aupr": {"type": "number", "minimum": 0, "maximum": 1},
        "histogram": {
            "type": "object",
            "required": ["bin_edges", "count_known", "count_unknown"],
            "properties": {
                "bin_edges": {"type": "array", "items": {"type": "number"}},
                "count_known": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "count_unknown": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            },
        },
        "score_stats": {
            "type": "object",
            "additionalProperties": {"type": "number"},
        },
    },
    "additionalProperties": False,
}


def miou_report(pred: LabelSet, gt: LabelSet, registry: ClassRegistry) -> EvalReport:
    """Confusion matrix and IoU splits over unknown + old + novel classes.

    The evaluated novel set is the learned-novel classes plus any remaining
    novel classes present in the ground truth, so a closed or open model
    scores zero (not undefined) on classes it cannot emit yet.
    """
    if pred.num_points != gt.num_points:
        raise DomainError("prediction and ground truth lengths differ")
    keep = ~gt.void_mask
    if not keep.any():
        raise DomainError("every ground-truth point is void")
    p = pred.labels[keep]
    g = gt.labels[keep]

    present_remaining = sorted(set(np.unique(g).tolist()) & registry.remaining_novel)
    novel_eval = tuple(registry.learned_novel) + tuple(present_remaining)
    class_ids = (UNKNOWN_ID, *registry.old_classes, *novel_eval)

    lut = np.full(max(class_ids) + 2, -1, dtype=np.int64)
    for i, cid in enumerate(class_ids):
        lut[cid] = i
    for name, arr in (("prediction", p), ("ground truth", g)):
        bad = (arr < 0) | (arr >= lut.shape[0]) | (lut[np.clip(arr, 0, lut.shape[0] - 1)] < 0)
        if bad.any():
            raise DomainError(
                f"{name} contains labels outside the evaluated classes: "
                f"{np.unique(arr[bad]).tolist()[:8]}"
            )
    k = len(class_ids)
    confusion = np.bincount(lut[g] * k + lut[p], minlength=k * k).reshape(k, k)

    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    present = (tp + fp + fn) > 0
    iou = np.zeros(k, dtype=np.float64)
    iou[present] = tp[present] / (tp + fp + fn)[present]

    iou_per_class = {
        int(cid): float(iou[i]) for i, cid in enumerate(class_ids) if present[i]
    }

    def mean_over(ids) -> float:
        vals = [iou_per_class[c] for c in ids if c in iou_per_class]
        return float(np.mean(vals)) if vals else 0.0

    return EvalReport(
        class_ids=class_ids,
        confusion=tuple(tuple(int(x) for x in row) for row in confusion),
        iou_per_class=iou_per_class,
        miou=mean_over((*registry.old_classes, *novel_eval)),
        miou_old=mean_over(registry.old_classes),
        miou_novel=mean_over(novel_eval),
    )
