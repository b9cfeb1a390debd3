"""Segmentation model: shared point extractor plus normal and redundancy heads.

The extractor encodes each point from its intensity and the statistics of
its vertical pillar (occupancy, height range, pillar-relative heights,
centroid offset, footprint radius), then concatenates the mean encoded
feature of the pillar, so a point's output depends on its own geometry and
its pillar's population but not on point order. The normal head ``g_nm``
scores the old classes, the redundancy head ``g_re`` holds ``rc_total``
slots: unassigned slots score the unknown class, rebound slots score learned
novel classes.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .core import (
    ClassRegistry,
    ConfigError,
    DomainError,
    LogitsBundle,
    NumericError,
    Scan,
    derive_seed,
)

CHECKPOINT_VERSION = 1
# height above pillar floor, intensity, log1p pillar count, pillar z-range,
# offset from pillar mean height, horizontal offset from pillar centroid,
# pillar footprint radius. All heights are pillar-relative so the encoder
# sees object shape, not absolute elevation.
POINT_FEATURES = 7


class Stage(Enum):
    CLOSED = "closed"
    OPEN = "open"
    POST_IL = "post-il"


@dataclass(frozen=True)
class ArchConfig:
    """``voxel_size`` is the horizontal side of the square pillars used for
    density, shape statistics, and context pooling; ``coord_scale``
    normalizes meter-valued features into the encoder's working range."""

    hidden_width: int = 64
    dropout_rate: float = 0.1
    voxel_size: float = 2.0
    coord_scale: float = 0.2

    def __post_init__(self):
        if self.hidden_width <= 0:
            raise ConfigError("hidden_width must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.voxel_size <= 0:
            raise ConfigError("voxel_size must be positive")
        if self.coord_scale <= 0:
            raise ConfigError("coord_scale must be positive")

    def to_json_dict(self) -> dict:
        return {
            "hidden_width": self.hidden_width,
            "dropout_rate": self.dropout_rate,
            "voxel_size": self.voxel_size,
            "coord_scale": self.coord_scale,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ArchConfig":
        return cls(
            hidden_width=int(d.get("hidden_width", 64)),
            dropout_rate=float(d.get("dropout_rate", 0.1)),
            voxel_size=float(d.get("voxel_size", 2.0)),
            coord_scale=float(d.get("coord_scale", 0.2)),
        )


def _init_linear(in_features: int, out_features: int, gen: torch.Generator) -> nn.Linear:
    layer = nn.Linear(in_features, out_features, dtype=torch.float64)
    bound = 1.0 / math.sqrt(in_features)
    with torch.no_grad():
        layer.weight.copy_(
            (torch.rand((out_features, in_features), generator=gen, dtype=torch.float64) * 2 - 1)
            * bound
        )
        layer.bias.copy_(
            (torch.rand((out_features,), generator=gen, dtype=torch.float64) * 2 - 1) * bound
        )
    return layer


def _check_finite(t: torch.Tensor, layer_name: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite activations after layer {layer_name!r}")
    return t


def _canonical_order(scan: Scan, voxel_size: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Total point order independent of input permutation.

    Points are keyed by (pillar pair, x, y, z, intensity); any remaining
    ties are bitwise-identical points, for which order cannot matter.
    Returns (order, inverse order, pillar ids in sorted order).
    """
    pts = scan.points
    pillar = np.floor(pts[:, :2] / voxel_size).astype(np.int64)
    inten = scan.intensity if scan.intensity is not None else np.zeros(scan.num_points)
    order = np.lexsort((inten, pts[:, 2], pts[:, 1], pts[:, 0], pillar[:, 1], pillar[:, 0]))
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    return order, inverse, pillar[order]


class PointSegmenter(nn.Module):
    """Per-point segmentation model with voxel-mean context.

    All parameters are float64; initialization and dropout draw from explicit
    generators so identical seeds give identical models.
    """

    def __init__(self, registry: ClassRegistry, arch: ArchConfig, seed: int, stage: Stage):
        super().__init__()
        if registry.num_old <= 0:
            raise ConfigError("registry must declare at least one old class")
        if stage is Stage.POST_IL and registry.num_novel == 0:
            raise DomainError("post-IL stage needs at least one learned novel class")
        if stage is Stage.CLOSED and registry.num_novel > 0:
            raise DomainError("closed stage cannot carry learned novel classes")
        self.registry = registry
        self.arch = arch
        self.stage = stage
        h = arch.hidden_width
        gen = torch.Generator().manual_seed(derive_seed(seed, "init"))
        self.enc1 = _init_linear(POINT_FEATURES, h, gen)
        self.enc2 = _init_linear(h, h, gen)
        self.mix = _init_linear(2 * h, h, gen)
        self.g_nm = _init_linear(h, registry.num_old, gen)
        if stage is Stage.CLOSED:
            self.g_re: Optional[nn.Linear] = None
        else:
            self.g_re = _init_linear(h, registry.rc_total, gen)

    def features(
        self,
        scan: Scan,
        dropout_on: bool = False,
        rng: Optional[torch.Generator] = None,
    ) -> torch.Tensor:
        """Per-point feature map (M, H); the only dropout site sits here."""
        order, inverse, pillar_sorted = _canonical_order(scan, self.arch.voxel_size)
        boundary = np.empty(order.size, dtype=bool)
        boundary[0] = True
        boundary[1:] = (pillar_sorted[1:] != pillar_sorted[:-1]).any(axis=1)
        seg_of_point = np.cumsum(boundary) - 1
        counts = np.bincount(seg_of_point)
        starts = np.flatnonzero(boundary)

        pts = scan.points[order]
        inten = (
            scan.intensity[order]
            if scan.intensity is not None
            else np.zeros(order.size)
        )
        x_s, y_s, z_s = pts[:, 0], pts[:, 1], pts[:, 2]
        z_min = np.minimum.reduceat(z_s, starts)[seg_of_point]
        z_max = np.maximum.reduceat(z_s, starts)[seg_of_point]
        z_mean = (np.add.reduceat(z_s, starts) / counts)[seg_of_point]
        cx = (np.add.reduceat(x_s, starts) / counts)[seg_of_point]
        cy = (np.add.reduceat(y_s, starts) / counts)[seg_of_point]
        sq = (np.add.reduceat(x_s**2 + y_s**2, starts) / counts)[seg_of_point]
        spread = np.sqrt(np.maximum(sq - cx**2 - cy**2, 0.0))

        scale = self.arch.coord_scale
        feat = np.empty((order.size, POINT_FEATURES))
        feat[:, 0] = (z_s - z_min) * scale
        feat[:, 1] = inten
        feat[:, 2] = np.log1p(counts[seg_of_point])
        feat[:, 3] = (z_max - z_min) * scale
        feat[:, 4] = (z_s - z_mean) * scale
        feat[:, 5] = np.hypot(x_s - cx, y_s - cy) * scale
        feat[:, 6] = spread * scale
        x = torch.from_numpy(feat)

        h1 = _check_finite(torch.tanh(self.enc1(x)), "enc1")
        h2 = _check_finite(torch.tanh(self.enc2(h1)), "enc2")

        seg_idx = torch.from_numpy(seg_of_point.astype(np.int64))
        ends = np.append(starts[1:], order.size)
        padded = torch.cat([torch.zeros(1, h2.shape[1], dtype=h2.dtype), torch.cumsum(h2, dim=0)])
        seg_sum = padded[torch.from_numpy(ends)] - padded[torch.from_numpy(starts)]
        seg_mean = seg_sum / torch.from_numpy(counts.astype(np.float64)).unsqueeze(1)
        context = seg_mean[seg_idx]

        h = _check_finite(torch.tanh(self.mix(torch.cat([h2, context], dim=1))), "mix")
        if dropout_on and self.arch.dropout_rate > 0.0:
            if rng is None:
                raise ConfigError("dropout_on requires an explicit torch.Generator")
            keep = (
                torch.rand(h.shape, generator=rng, dtype=torch.float64)
                >= self.arch.dropout_rate
            ).to(h.dtype)
            h = h * keep / (1.0 - self.arch.dropout_rate)

        return h[torch.from_numpy(inverse)]

    def forward(
        self,
        scan: Scan,
        dropout_on: bool = False,
        rng: Optional[torch.Generator] = None,
    ) -> LogitsBundle:
        h = self.features(scan, dropout_on=dropout_on, rng=rng)
        y_old = _check_finite(self.g_nm(h), "g_nm")
        if self.g_re is None:
            return LogitsBundle(y_old=y_old)
        re_all = _check_finite(self.g_re(h), "g_re")
        uk = self.registry.unknown_slots
        nv = self.registry.novel_slots
        y_uk = re_all[:, list(uk)] if uk else None
        y_nv = re_all[:, list(nv)] if nv else None
        return LogitsBundle(y_old=y_old, y_uk=y_uk, y_nv=y_nv)


def init_model(
    registry: ClassRegistry, arch: ArchConfig, seed: int, stage: Stage = Stage.CLOSED
) -> PointSegmenter:
    """Fresh model at the closed or open stage, deterministic in ``seed``."""
    if stage not in (Stage.CLOSED, Stage.OPEN):
        raise DomainError("fresh models start at the closed or open stage")
    return PointSegmenter(registry, arch, seed, stage)


def max_lowest_index(scores: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Row-wise max with ties broken to the lowest column.

    Gradient flows only through the selected column.
    """
    if scores.ndim != 2 or scores.shape[1] == 0:
        raise DomainError("max_lowest_index expects a non-empty (m, k) tensor")
    detached = scores.detach()
    top = detached.max(dim=1, keepdim=True).values
    cols = torch.arange(scores.shape[1]).expand_as(detached)
    sentinel = torch.full_like(cols, scores.shape[1])
    first = torch.where(detached == top, cols, sentinel).min(dim=1).values
    values = scores.gather(1, first.unsqueeze(1)).squeeze(1)
    return values, first


def assemble_scores(bundle: LogitsBundle, stage: Stage) -> torch.Tensor:
    """Per-point score vector with the unknown entry at index 0.

    Open stage: [max over unknown slots, y_old]. Post-IL: [max over unknown
    slots, y_old, y_nv]; assigned novel slots never feed the unknown entry.
    """
    if stage is Stage.CLOSED:
        raise DomainError("closed stage has no assembled score vector")
    if bundle.y_uk is None:
        raise DomainError(f"stage {stage.value!r} needs unknown-slot logits")
    unknown, _ = max_lowest_index(bundle.y_uk)
    parts = [unknown.unsqueeze(1), bundle.y_old]
    if stage is Stage.POST_IL:
        if bundle.y_nv is None:
            raise DomainError("post-IL assembly needs novel-slot logits")
        parts.append(bundle.y_nv)
    elif bundle.y_nv is not None:
        raise DomainError("open-stage bundle must not carry novel-slot logits")
    return torch.cat(parts, dim=1)


def add_redundancy_heads(model: PointSegmenter, seed: int) -> PointSegmenter:
    """Closed model -> open model: attach a fresh redundancy head."""
    if model.stage is not Stage.CLOSED:
        raise DomainError("redundancy heads are added to a closed-stage model")
    out = PointSegmenter(model.registry, model.arch, seed, Stage.OPEN)
    with torch.no_grad():
        for name in ("enc1", "enc2", "mix", "g_nm"):
            getattr(out, name).weight.copy_(getattr(model, name).weight)
            getattr(out, name).bias.copy_(getattr(model, name).bias)
    return out


def reassign_rc(
    model: PointSegmenter, registry_after_advance: ClassRegistry, seed: int = 0
) -> PointSegmenter:
    """Rebind promoted slots and append freshly initialized replacements.

    Slot indices are stable, so a promoted class keeps the weights of the
    unknown slot it absorbed; only the replenishment slots are new. With no
    promotion the model is returned unchanged.
    """
    if model.g_re is None:
        raise DomainError("reassign_rc needs an open or post-IL model")
    old_reg = model.registry
    new_reg = registry_after_advance
    if new_reg == old_reg:
        return model
    promoted = set(new_reg.learned_novel) - set(old_reg.learned_novel)
    if not promoted or set(old_reg.learned_novel) - set(new_reg.learned_novel):
        raise DomainError("registry must be the advanced version of the model's")
    if new_reg.rc_total < old_reg.rc_total:
        raise DomainError("advanced registry cannot shrink the slot pool")

    out = PointSegmenter(new_reg, model.arch, derive_seed(seed, "reassign"), Stage.POST_IL)
    with torch.no_grad():
        for name in ("enc1", "enc2", "mix", "g_nm"):
            getattr(out, name).weight.copy_(getattr(model, name).weight)
            getattr(out, name).bias.copy_(getattr(model, name).bias)
        keep = old_reg.rc_total
        out.g_re.weight[:keep].copy_(model.g_re.weight)
        out.g_re.bias[:keep].copy_(model.g_re.bias)
    return out


# --- checkpoints -------------------------------------------------------------

def _encode_tensor(t: torch.Tensor) -> dict:
    arr = t.detach().numpy().astype("<f8")
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def _decode_tensor(d: dict) -> torch.Tensor:
    raw = base64.b64decode(d["data"])
    arr = np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).copy()
    return torch.from_numpy(arr)


def checkpoint_bytes(model: PointSegmenter) -> bytes:
    """Serialize a model to canonical JSON (stable bytes for equal models)."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "checkpoint",
        "stage": model.stage.value,
        "arch": model.arch.to_json_dict(),
        "registry": model.registry.to_json_dict(),
        "params": {
            name: _encode_tensor(param) for name, param in model.named_parameters()
        },
    }
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode("ascii")


def save_checkpoint(model: PointSegmenter, path: Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path: Path) -> PointSegmenter:
    from .core import FormatError

    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint {path}: {exc}") from exc
    if doc.get("kind") != "checkpoint" or doc.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    registry = ClassRegistry.from_json_dict(doc["registry"])
    arch = ArchConfig.from_json_dict(doc["arch"])
    stage = Stage(doc["stage"])
    model = PointSegmenter(registry, arch, seed=0, stage=stage)
    expected = {name for name, _ in model.named_parameters()}
    stored = set(doc["params"])
    if expected != stored:
        raise FormatError(
            f"checkpoint parameter names mismatch: missing {sorted(expected - stored)}, "
            f"unexpected {sorted(stored - expected)}"
        )
    with torch.no_grad():
        for name, param in model.named_parameters():
            value = _decode_tensor(doc["params"][name])
            if tuple(value.shape) != tuple(param.shape):
                raise FormatError(f"checkpoint tensor {name} has shape {tuple(value.shape)}")
            param.copy_(value)
    return model
