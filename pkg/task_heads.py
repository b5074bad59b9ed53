#!/usr/bin/env python3
"""
Task Heads
ReID embedding, person classification, attributes, soft-argmax pose and pyramid segmentation
"""

import logging
import math
from typing import Dict, List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from backbone import make_norm
from mtl_config import AttributeSchema, ConfigurationError, NormKind, ShapeError

logger = logging.getLogger(__name__)


def _vector_norm(kind: NormKind, channels: int, groups: int) -> nn.Module:
    if kind == NormKind.BATCH:
        return nn.BatchNorm1d(channels)
    return nn.GroupNorm(math.gcd(groups, channels), channels)


def embed_head(feature_map: torch.Tensor) -> torch.Tensor:
    """Global max pooling: (B, C, h, w) -> (B, C)"""
    return feature_map.amax(dim=(2, 3))


class EmbeddingHead(nn.Module):
    """Parameter-free ReID head; the pooled vector is the embedding"""

    def forward(self, feature_map: torch.Tensor) -> torch.Tensor:
        return embed_head(feature_map)


class ClassificationHead(nn.Module):
    """Normalization -> fully-connected layer; softmax gives the person distribution"""

    def __init__(self, in_channels: int, num_persons: int, norm_kind: NormKind = NormKind.BATCH, norm_groups: int = 8):
        super().__init__()
        if num_persons < 2:
            raise ConfigurationError("num_persons", "classification needs at least 2 persons")
        self.norm = _vector_norm(norm_kind, in_channels, norm_groups)
        self.fc = nn.Linear(in_channels, num_persons)

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        return self.fc(self.norm(embedding))

    def probabilities(self, embedding: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self(embedding), dim=1)


def classify_head(head: ClassificationHead, embedding: torch.Tensor) -> torch.Tensor:
    return head.probabilities(embedding)


class AttributeHead(nn.Module):
    """Shared normalization + ReLU stem, then an independent classifier per attribute"""

    def __init__(self, in_channels: int, schema: AttributeSchema, norm_kind: NormKind = NormKind.BATCH,
                 norm_groups: int = 8):
        super().__init__()
        schema.validate()
        self.schema = schema
        self.stem = nn.Sequential(_vector_norm(norm_kind, in_channels, norm_groups), nn.ReLU())
        self.classifiers = nn.ModuleDict({
            spec.name: nn.Linear(in_channels, spec.num_classes) for spec in schema.attributes
        })

    def forward(self, embedding: torch.Tensor) -> Dict[str, torch.Tensor]:
        shared = self.stem(embedding)
        return {name: classifier(shared) for name, classifier in self.classifiers.items()}

    def probabilities(self, embedding: torch.Tensor) -> Dict[str, torch.Tensor]:
        return {name: torch.softmax(logits, dim=1) for name, logits in self(embedding).items()}


def attribute_head(head: AttributeHead, embedding: torch.Tensor) -> Dict[str, torch.Tensor]:
    return head.probabilities(embedding)


def soft_argmax(heatmaps: torch.Tensor, stride: int, temperature: float = 1.0) -> torch.Tensor:
    """
    Differentiable joint coordinates from (B, J, h, w) heatmaps.

    Each map is turned into a spatial distribution softmax(temperature * map); the result is the
    expected cell centre (index + 0.5) * stride as (x, y) input pixels, shape (B, J, 2).
    """
    batch, joints, height, width = heatmaps.shape
    flat = (heatmaps * temperature).reshape(batch, joints, height * width)
    prob = torch.softmax(flat, dim=-1).reshape(batch, joints, height, width)
    xs = (torch.arange(width, device=heatmaps.device, dtype=heatmaps.dtype) + 0.5) * stride
    ys = (torch.arange(height, device=heatmaps.device, dtype=heatmaps.dtype) + 0.5) * stride
    x_exp = (prob.sum(dim=2) * xs).sum(dim=-1)
    y_exp = (prob.sum(dim=3) * ys).sum(dim=-1)
    return torch.stack([x_exp, y_exp], dim=-1)


class PoseHead(nn.Module):
    """1x1 convolution to one heatmap per joint, then soft-argmax"""

    def __init__(self, in_channels: int, num_joints: int, stride: int, temperature: float = 1.0,
                 project: bool = True):
        super().__init__()
        if num_joints < 1:
            raise ConfigurationError("num_joints", "must be at least 1")
        if not project and in_channels != num_joints:
            raise ConfigurationError("num_joints", f"unprojected heatmaps need {num_joints} channels, got {in_channels}")
        self.num_joints = num_joints
        self.stride = stride
        self.temperature = temperature
        # without projection (split output) the incoming slice already is the heatmap stack
        self.projection = nn.Conv2d(in_channels, num_joints, 1) if project else nn.Identity()

    def forward(self, feature_map: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        heatmaps = self.projection(feature_map)
        return heatmaps, soft_argmax(heatmaps, self.stride, self.temperature)


def pose_head(head: PoseHead, feature_map: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    return head(feature_map)


class _ConvNormReLU(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int, norm_kind: NormKind, groups: int):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False),
            make_norm(norm_kind, out_channels, math.gcd(groups, out_channels)),
            nn.ReLU(inplace=True),
        )


class SegmentationHead(nn.Module):
    """
    Feature-pyramid semantic head.

    Lateral 1x1 convolutions read backbone levels without modifying them, a top-down pathway merges
    them, every level is brought to the finest stride by conv + bilinear x2 steps, the levels are
    summed, projected to part logits and bilinearly upsampled to the input resolution.
    """

    def __init__(self, level_channels: Sequence[int], level_strides: Sequence[int], num_classes: int,
                 head_channels: int = 32, norm_kind: NormKind = NormKind.GROUP, norm_groups: int = 8):
        super().__init__()
        if len(level_channels) != len(level_strides) or not level_channels:
            raise ConfigurationError("level_strides", "one stride per pyramid level is required")
        if list(level_strides) != sorted(level_strides):
            raise ConfigurationError("level_strides", "levels must be ordered fine to coarse")
        self.level_strides = list(level_strides)
        self.output_stride = level_strides[0]
        self.num_classes = num_classes
        self.laterals = nn.ModuleList([nn.Conv2d(c, head_channels, 1) for c in level_channels])
        towers = []
        for stride in level_strides:
            steps = int(round(math.log2(stride / self.output_stride)))
            layers: List[nn.Module] = [_ConvNormReLU(head_channels, head_channels, norm_kind, norm_groups)]
            for _ in range(steps - 1):
                layers.append(nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False))
                layers.append(_ConvNormReLU(head_channels, head_channels, norm_kind, norm_groups))
            if steps > 0:
                layers.append(nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False))
            towers.append(nn.Sequential(*layers))
        self.towers = nn.ModuleList(towers)
        self.classifier = nn.Conv2d(head_channels, num_classes, 1)

    def forward(self, levels: Sequence[torch.Tensor], output_size: Tuple[int, int]) -> torch.Tensor:
        if len(levels) != len(self.laterals):
            raise ShapeError(f"expected {len(self.laterals)} pyramid levels, got {len(levels)}")
        height, width = output_size
        for level, stride in zip(levels, self.level_strides):
            expected = (height // stride, width // stride)
            if tuple(level.shape[-2:]) != expected:
                raise ShapeError(f"pyramid level at stride {stride} has spatial size {tuple(level.shape[-2:])}, "
                                 f"expected {expected}")

        merged = [lateral(level) for lateral, level in zip(self.laterals, levels)]
        for i in range(len(merged) - 2, -1, -1):
            merged[i] = merged[i] + F.interpolate(merged[i + 1], size=merged[i].shape[-2:], mode="nearest")

        summed = sum(tower(level) for tower, level in zip(self.towers, merged))
        logits = self.classifier(summed)
        return F.interpolate(logits, size=(height, width), mode="bilinear", align_corners=False)


def seg_head(head: SegmentationHead, pyramid_features: Sequence[torch.Tensor],
             output_size: Tuple[int, int]) -> torch.Tensor:
    return head(pyramid_features, output_size)
