"""Pixel and feature losses and their weighted combination."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from .core import LossWeights
from .errors import DivergenceError, DomainError

__all__ = [
    "LossWeights", "LossBreakdown", "appearance_loss", "pseudo_label_loss",
    "feature_similarity_loss", "dual_target_feat_loss", "weighted_total", "total_loss",
]


def appearance_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all pixels and channels.

    The subgradient at exact ties is 0 (``torch.abs`` convention).
    """
    if pred.shape != target.shape:
        raise DomainError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def pseudo_label_loss(pred: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    return appearance_loss(pred, label)


def feature_similarity_loss(pred_features: torch.Tensor,
                            target_features: torch.Tensor) -> torch.Tensor:
    """Mean over grid cells of 1 − cosine similarity.

    Maps are (C, H, W) or (B, C, H, W) with features along C. A zero feature
    vector is rejected rather than guarded with an epsilon.
    """
    if pred_features.shape != target_features.shape:
        raise DomainError("feature maps must be congruent")
    pn = pred_features.norm(dim=-3)
    tn = target_features.norm(dim=-3)
    if bool((pn == 0).any()) or bool((tn == 0).any()):
        raise DomainError("zero-norm feature vector")
    cos = (pred_features * target_features).sum(dim=-3) / (pn * tn)
    return (1.0 - cos).mean()


def dual_target_feat_loss(pred_features, pseudo_label_features, input_features) -> torch.Tensor:
    """Equal-weight alignment to both the pseudo-label and the input."""
    return 0.5 * (feature_similarity_loss(pred_features, pseudo_label_features)
                  + feature_similarity_loss(pred_features, input_features))


@dataclass(frozen=True)
class LossBreakdown:
    sup: float
    ps: float
    wpl: float
    sem: float
    feat: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def weighted_total(sup, ps, wpl, sem, feat, weights: LossWeights):
    return sup + weights.w1 * ps + weights.w2 * wpl + weights.w3 * sem + weights.w4 * feat


def total_loss(sup, ps, wpl, sem, feat, weights: LossWeights) -> LossBreakdown:
    """Breakdown of the weighted objective; raises on any non-finite term."""
    parts = {k: float(v) for k, v in dict(sup=sup, ps=ps, wpl=wpl, sem=sem, feat=feat).items()}
    total = weighted_total(**parts, weights=weights)
    breakdown = LossBreakdown(**parts, total=total)
    if not all(math.isfinite(v) for v in breakdown.as_dict().values()):
        raise DivergenceError(f"non-finite loss: {breakdown.as_dict()}", breakdown)
    return breakdown
