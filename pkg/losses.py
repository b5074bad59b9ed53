#!/usr/bin/env python3
"""
Multi-Task Losses
Batch-hard triplet, person and attribute cross-entropy, Euclidean pose loss, bootstrapped pixel CE.

A loss returns None when the batch carries no valid label for its task; combine() drops such
parts so multi-dataset batches without a task never produce NaN.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import torch
import torch.nn.functional as F

from mtl_config import (IGNORE_LABEL, LOSS_NAMES, MISSING_LABEL, CompositionError, ConfigurationError,
                        LabelError, MarginMode)

DISTANCE_EPS = 1e-12


def pairwise_distances(embeddings: torch.Tensor, squared: bool = False) -> torch.Tensor:
    """Euclidean distance matrix; the pre-sqrt value is clamped at 1e-12"""
    diff = embeddings.unsqueeze(1) - embeddings.unsqueeze(0)
    dist_sq = (diff * diff).sum(dim=-1)
    if squared:
        return dist_sq
    return dist_sq.clamp(min=DISTANCE_EPS).sqrt()


def check_pk_composition(identities: torch.Tensor):
    unique, counts = torch.unique(identities, return_counts=True)
    if unique.numel() < 2:
        raise CompositionError("batch-hard triplet needs at least two identities in the batch")
    lonely = unique[counts < 2].tolist()
    if lonely:
        raise CompositionError(f"identities {lonely} have a single sample in the batch (need >= 2)")


def batch_hard_triplet(embeddings: torch.Tensor, identities: torch.Tensor,
                       margin_mode: MarginMode = MarginMode.SOFTPLUS, margin: float = 0.2,
                       squared: bool = False) -> torch.Tensor:
    """Mean over anchors of the hardest-positive / hardest-negative triplet term"""
    margin_mode = MarginMode(margin_mode)
    check_pk_composition(identities)
    dist = pairwise_distances(embeddings, squared=squared)
    same = identities.unsqueeze(0) == identities.unsqueeze(1)
    eye = torch.eye(len(identities), dtype=torch.bool, device=identities.device)
    positive_mask = same & ~eye
    negative_mask = ~same

    hardest_positive = dist.masked_fill(~positive_mask, float("-inf")).amax(dim=1)
    hardest_negative = dist.masked_fill(~negative_mask, float("inf")).amin(dim=1)
    gap = hardest_positive - hardest_negative
    if margin_mode == MarginMode.HINGE:
        return F.relu(margin + gap).mean()
    return F.softplus(gap).mean()


def _log_probabilities(scores: torch.Tensor, from_logits: bool) -> torch.Tensor:
    if from_logits:
        return F.log_softmax(scores, dim=1)
    return scores.clamp(min=1e-12).log()


def person_ce(scores: torch.Tensor, labels: torch.Tensor, from_logits: bool = True) -> torch.Tensor:
    """Batch mean of -ln p[label]; scores are logits unless from_logits=False"""
    num_classes = scores.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"person labels must lie in [0, {num_classes}), got range "
                         f"[{int(labels.min())}, {int(labels.max())}]")
    log_prob = _log_probabilities(scores, from_logits)
    return -log_prob.gather(1, labels.long().unsqueeze(1)).squeeze(1).mean()


def attribute_ce(scores: Mapping[str, torch.Tensor], labels: Mapping[str, torch.Tensor],
                 from_logits: bool = True) -> Optional[torch.Tensor]:
    """Unweighted mean of per-attribute batch-mean CE; labels equal to -1 are missing"""
    terms = []
    for name, attribute_scores in scores.items():
        if name not in labels:
            continue
        target = labels[name].long()
        valid = target != MISSING_LABEL
        if not bool(valid.any()):
            continue
        num_classes = attribute_scores.shape[1]
        if target[valid].min() < 0 or target[valid].max() >= num_classes:
            raise LabelError(f"attribute '{name}' labels must lie in [0, {num_classes})")
        log_prob = _log_probabilities(attribute_scores[valid], from_logits)
        terms.append(-log_prob.gather(1, target[valid].unsqueeze(1)).mean())
    if not terms:
        return None
    return torch.stack(terms).mean()


def pose_l2(predicted: torch.Tensor, target: torch.Tensor, visible: torch.Tensor,
            normalizer: float = 1.0) -> Optional[torch.Tensor]:
    """Mean squared Euclidean distance over visible joints, in units of `normalizer` pixels"""
    visible = visible.bool()
    if not bool(visible.any()):
        return None
    offsets = (predicted - target) / normalizer
    squared = (offsets * offsets).sum(dim=-1)
    return squared[visible].mean()


def bootstrapped_ce(logits: torch.Tensor, mask: torch.Tensor, keep_fraction: float = 0.25,
                    ignore_index: int = IGNORE_LABEL) -> Optional[torch.Tensor]:
    """Mean CE over the hardest ceil(keep_fraction * valid) pixels of the batch"""
    if not 0 < keep_fraction <= 1:
        raise ConfigurationError("keep_fraction", f"{keep_fraction} outside (0, 1]")
    pixel_loss = F.cross_entropy(logits, mask.long(), ignore_index=ignore_index, reduction="none")
    valid = mask != ignore_index
    count = int(valid.sum())
    if count == 0:
        return None
    keep = max(1, math.ceil(round(keep_fraction * count, 9)))
    hardest, _ = torch.topk(pixel_loss[valid], keep, sorted=False)
    return hardest.mean()


@dataclass
class LossBundle:
    losses: Dict[str, torch.Tensor] = field(default_factory=dict)
    weights: Dict[str, float] = field(default_factory=dict)
    total: Optional[torch.Tensor] = None

    def values(self) -> Dict[str, float]:
        """Plain floats for logging; absent tasks are simply missing"""
        record = {name: float(value.detach()) for name, value in self.losses.items()}
        if self.total is not None:
            record["total"] = float(self.total.detach())
        return record


def combine(parts: Mapping[str, Optional[torch.Tensor]], weights: Optional[Mapping[str, float]] = None) -> LossBundle:
    """Weighted sum over the present parts (default weight 1.0)"""
    weights = dict(weights or {})
    bundle = LossBundle()
    total = None
    for name, value in parts.items():
        if name not in LOSS_NAMES:
            raise ConfigurationError("losses", f"unknown loss '{name}'")
        weight = float(weights.get(name, 1.0))
        if weight <= 0:
            raise ConfigurationError("loss_weights", f"weight for '{name}' must be positive")
        if value is None:
            continue
        bundle.losses[name] = value
        bundle.weights[name] = weight
        term = weight * value
        total = term if total is None else total + term
    bundle.total = total
    return bundle
