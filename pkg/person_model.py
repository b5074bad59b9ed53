#!/usr/bin/env python3
"""
Person Multi-Task Model
Backbone plus task heads, with per-topology routing of tasks to feature maps
"""

import logging
from typing import Any, Dict, Iterable, List, Optional

import torch
import torch.nn as nn

from backbone import SHARED_BRANCH, build_backbone, count_parameters, split_channels
from mtl_config import ModelConfig, TaskError, Topology
from task_heads import AttributeHead, ClassificationHead, EmbeddingHead, PoseHead, SegmentationHead, embed_head

logger = logging.getLogger(__name__)

# Which heads each task owns
TASK_HEADS = {
    "reid": ("embedding", "classifier"),
    "attributes": ("attributes",),
    "pose": ("pose",),
    "segmentation": ("segmentation",),
}


class PersonMultiTaskModel(nn.Module):
    """
    One backbone, any subset of the four task heads.

    SingleBranch: every head reads the shared output. MultiBranch: each task reads its assigned
    branch. SplitOutput: pose reads the first split_channels channels as heatmaps, every other head
    reads the remaining channels.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        backbone_cfg = config.backbone
        head_cfg = config.heads
        self.backbone = build_backbone(backbone_cfg)
        self.topology = backbone_cfg.topology

        split = self.topology == Topology.SPLIT_OUTPUT
        num_joints = head_cfg.num_joints
        pose_channels = backbone_cfg.split_channels if split else backbone_cfg.final_channels
        shared_channels = backbone_cfg.final_channels - (pose_channels if split else 0)
        vector_norm = head_cfg.classifier_norm or backbone_cfg.norm_kind
        groups = backbone_cfg.norm_groups

        self.heads = nn.ModuleDict()
        if "reid" in head_cfg.tasks:
            self.heads["embedding"] = EmbeddingHead()
            if head_cfg.num_persons:
                self.heads["classifier"] = ClassificationHead(shared_channels, head_cfg.num_persons, vector_norm, groups)
        if "attributes" in head_cfg.tasks:
            self.heads["attributes"] = AttributeHead(shared_channels, head_cfg.attribute_schema, vector_norm, groups)
        if "pose" in head_cfg.tasks:
            self.heads["pose"] = PoseHead(
                pose_channels, num_joints,
                backbone_cfg.total_stride, head_cfg.temperature, project=not split)
        if "segmentation" in head_cfg.tasks:
            strides = self.backbone.stage_strides
            level_channels = list(backbone_cfg.stage_channels[:-1]) + [shared_channels]
            self.heads["segmentation"] = SegmentationHead(
                level_channels, strides, head_cfg.num_parts, head_cfg.head_channels, backbone_cfg.norm_kind, groups)

    @property
    def tasks(self) -> List[str]:
        return list(self.config.heads.tasks)

    @property
    def input_size(self):
        return self.config.backbone.input_height, self.config.backbone.input_width

    def has_head(self, name: str) -> bool:
        return name in self.heads

    def branch_for(self, task: str) -> str:
        if self.topology == Topology.MULTI_BRANCH:
            return f"branch_{self.config.branch_index(task)}"
        return SHARED_BRANCH

    def _task_features(self, branches: Dict[str, torch.Tensor], task: str) -> torch.Tensor:
        feature_map = branches[self.branch_for(task)]
        if self.topology != Topology.SPLIT_OUTPUT:
            return feature_map
        pose_slice, shared_slice = split_channels(feature_map, self.config.backbone.split_channels)
        return pose_slice if task == "pose" else shared_slice

    def forward(self, images: torch.Tensor, tasks: Optional[Iterable[str]] = None,
                with_classifier: bool = True) -> Dict[str, Any]:
        """Run only the heads of the requested tasks; returns a dict of task outputs"""
        requested = list(tasks) if tasks is not None else self.tasks
        missing = [t for t in requested if t not in self.tasks]
        if missing:
            raise TaskError(f"model has no head for tasks {missing} (available: {self.tasks})")

        features = self.backbone(images)
        outputs: Dict[str, Any] = {}
        if "reid" in requested:
            embedding = self.heads["embedding"](self._task_features(features.branches, "reid"))
            outputs["embedding"] = embedding
            if with_classifier and "classifier" in self.heads:
                outputs["person_logits"] = self.heads["classifier"](embedding)
        if "attributes" in requested:
            # the attribute head sits on top of the ReID embedding of the attribute branch
            pooled = embed_head(self._task_features(features.branches, "attributes"))
            outputs["attribute_logits"] = self.heads["attributes"](pooled)
        if "pose" in requested:
            heatmaps, joints = self.heads["pose"](self._task_features(features.branches, "pose"))
            outputs["heatmaps"] = heatmaps
            outputs["joints"] = joints
        if "segmentation" in requested:
            top = self._task_features(features.branches, "segmentation")
            levels = list(features.stage_features[:-1]) + [top]
            outputs["seg_logits"] = self.heads["segmentation"](levels, self.input_size)
        return outputs

    def parameter_report(self) -> Dict[str, int]:
        report = {"backbone": count_parameters(self.backbone),
                  "final_stage": self.backbone.final_stage_parameter_count()}
        for name, head in self.heads.items():
            report[f"heads.{name}"] = count_parameters(head)
        for task in self.tasks:
            report[f"tasks.{task}"] = sum(count_parameters(self.heads[h]) for h in TASK_HEADS[task] if h in self.heads)
        report["total"] = count_parameters(self)
        return report


def build_model(config: ModelConfig) -> PersonMultiTaskModel:
    model = PersonMultiTaskModel(config)
    logger.info(f"Model heads: {list(model.heads.keys())}, parameters: {count_parameters(model):,}")
    return model
