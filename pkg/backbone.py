#!/usr/bin/env python3
"""
Person Backbone
Staged residual feature extractor with single-branch, multi-branch and split-output topologies
"""

import copy
import logging
from dataclasses import dataclass
from typing import Dict, List, Tuple

import torch
import torch.nn as nn

from mtl_config import BackboneConfig, BoundsError, NormKind, ShapeError, Topology

logger = logging.getLogger(__name__)

SHARED_BRANCH = "shared"


def make_norm(kind: NormKind, channels: int, groups: int) -> nn.Module:
    """Normalization layer for (N, C, ...) tensors"""
    if kind == NormKind.BATCH:
        return nn.BatchNorm2d(channels)
    return nn.GroupNorm(groups, channels)


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with an identity or projected shortcut"""

    def __init__(self, in_channels: int, out_channels: int, stride: int, norm_kind: NormKind, groups: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.norm1 = make_norm(norm_kind, out_channels, groups)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.norm2 = make_norm(norm_kind, out_channels, groups)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = nn.Identity()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                make_norm(norm_kind, out_channels, groups),
            )

    def forward(self, x):
        out = self.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


def _make_stage(in_channels: int, out_channels: int, blocks: int, stride: int,
                norm_kind: NormKind, groups: int) -> nn.Sequential:
    layers = [BasicBlock(in_channels, out_channels, stride, norm_kind, groups)]
    for _ in range(blocks - 1):
        layers.append(BasicBlock(out_channels, out_channels, 1, norm_kind, groups))
    return nn.Sequential(*layers)


@dataclass
class BackboneOutput:
    branches: Dict[str, torch.Tensor]
    # stage outputs at strides 4, 8, ..., total_stride
    stage_features: List[torch.Tensor]


class PersonBackbone(nn.Module):
    """
    Stem (stride 2), one stride-2 stage per entry of stage_channels, then a stride-1 final stage.
    MultiBranch owns one copy of the final stage per branch; every earlier parameter is shared.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config.validate()
        channels = config.stage_channels
        self.register_buffer("input_mean", torch.tensor(config.input_mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("input_std", torch.tensor(config.input_std, dtype=torch.float32).view(1, 3, 1, 1))

        self.stem = nn.Sequential(
            nn.Conv2d(3, channels[0], 3, stride=2, padding=1, bias=False),
            make_norm(config.norm_kind, channels[0], config.norm_groups),
            nn.ReLU(inplace=True),
        )
        stages = []
        in_channels = channels[0]
        for out_channels, blocks in zip(channels, config.blocks_per_stage):
            stages.append(_make_stage(in_channels, out_channels, blocks, 2, config.norm_kind, config.norm_groups))
            in_channels = out_channels
        self.stages = nn.ModuleList(stages)

        final_stage = _make_stage(in_channels, config.final_channels, config.final_blocks, 1,
                                  config.norm_kind, config.norm_groups)
        # deepcopy keeps every branch identically initialized
        self.branches = nn.ModuleList([final_stage] + [copy.deepcopy(final_stage)
                                                       for _ in range(config.num_branches - 1)])

    @property
    def branch_names(self) -> List[str]:
        if self.config.topology == Topology.MULTI_BRANCH:
            return [f"branch_{i}" for i in range(self.config.num_branches)]
        return [SHARED_BRANCH]

    @property
    def stage_strides(self) -> List[int]:
        return [2 ** (i + 2) for i in range(len(self.config.stage_channels))]

    def check_input(self, images: torch.Tensor):
        expected = (3, self.config.input_height, self.config.input_width)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ShapeError(f"expected images of shape (B, {expected[0]}, {expected[1]}, {expected[2]}), "
                             f"got {tuple(images.shape)}")

    def forward(self, images: torch.Tensor) -> BackboneOutput:
        self.check_input(images)
        x = (images - self.input_mean) / self.input_std
        x = self.stem(x)
        stage_features = []
        for stage in self.stages:
            x = stage(x)
            stage_features.append(x)
        outputs = {name: branch(x) for name, branch in zip(self.branch_names, self.branches)}
        return BackboneOutput(branches=outputs, stage_features=stage_features)

    def final_stage_parameter_count(self) -> int:
        return count_parameters(self.branches[0])


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def build_backbone(config: BackboneConfig) -> PersonBackbone:
    backbone = PersonBackbone(config)
    logger.info(f"Built {config.topology.value} backbone with {count_parameters(backbone):,} parameters "
                f"({config.norm_kind.value} norm, {config.num_branches} branch(es))")
    return backbone


def forward_features(extractor: PersonBackbone, images: torch.Tensor) -> Dict[str, torch.Tensor]:
    """Branch-keyed feature maps of shape (B, C, H/S, W/S)"""
    return extractor(images).branches


def split_channels(feature_map: torch.Tensor, num_pose_channels: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Channel-wise split into (pose slice, shared slice); gradients of the two never mix"""
    channels = feature_map.shape[1]
    if not 0 < num_pose_channels < channels:
        raise BoundsError(f"split point {num_pose_channels} outside (0, {channels})")
    return feature_map[:, :num_pose_channels], feature_map[:, num_pose_channels:]
