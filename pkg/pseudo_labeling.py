#!/usr/bin/env python3
"""
Pseudo Labeling
Annotates a target dataset with the joint and part-mask predictions of trained models
"""

import logging
from dataclasses import replace
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from batch_sampling import PlannedBatchDataset, make_sequential_batches, planned_loader
from mtl_config import TASKS, ConfigurationError, TaskError
from person_datasets import (LIP_FLIP_PAIRS, LIP_PART_NAMES, MERGED_PART_NAMES, MPII_FLIP_PAIRS, MPII_JOINT_NAMES,
                             DatasetManifest, JointSet, load_manifest, resize_joints, save_manifest, write_mask)
from trainer import model_from_checkpoint

logger = logging.getLogger(__name__)

HEAD_SIZE_FACTOR = 1.25


def default_joint_names(num_joints: int) -> Tuple[List[str], List[Tuple[int, int]]]:
    if num_joints == len(MPII_JOINT_NAMES):
        return list(MPII_JOINT_NAMES), list(MPII_FLIP_PAIRS)
    return [f"joint_{i}" for i in range(num_joints)], []


def default_part_names(num_parts: int) -> Tuple[List[str], List[Tuple[int, int]]]:
    if num_parts == len(MERGED_PART_NAMES):
        return list(MERGED_PART_NAMES), []
    if num_parts == len(LIP_PART_NAMES):
        return list(LIP_PART_NAMES), list(LIP_FLIP_PAIRS)
    return [f"part_{i}" for i in range(num_parts)], []


def head_size_from_joints(joints: JointSet, joint_names: Sequence[str], image_height: int) -> float:
    """Head size from the head-top to upper-neck segment, or an eighth of the image height"""
    if "head_top" in joint_names and "upper_neck" in joint_names:
        top = joints.coords[joint_names.index("head_top")]
        neck = joints.coords[joint_names.index("upper_neck")]
        return max(1.0, HEAD_SIZE_FACTOR * float(np.linalg.norm(top - neck)))
    return max(1.0, image_height / 8.0)


class PseudoLabeler:
    """Runs a pose model and/or a segmentation model over every record of a manifest"""

    def __init__(self, pose_checkpoint=None, seg_checkpoint=None, device: str = "cpu", batch_size: int = 32,
                 joint_names: Optional[Sequence[str]] = None, part_names: Optional[Sequence[str]] = None):
        if pose_checkpoint is None and seg_checkpoint is None:
            raise ConfigurationError("checkpoint", "pseudo-labeling needs a pose and/or a segmentation checkpoint")
        self.device = device
        self.batch_size = batch_size
        self.processing_log: List[Dict[str, Any]] = []
        self.pose_model = self._load(pose_checkpoint, "pose") if pose_checkpoint is not None else None
        self.seg_model = self._load(seg_checkpoint, "segmentation") if seg_checkpoint is not None else None

        if self.pose_model is not None:
            names, pairs = default_joint_names(self.pose_model.config.heads.num_joints)
            if joint_names is not None:
                names, pairs = list(joint_names), (list(MPII_FLIP_PAIRS) if list(joint_names) == MPII_JOINT_NAMES else [])
            if len(names) != self.pose_model.config.heads.num_joints:
                raise ConfigurationError("joint_names", f"{len(names)} names for "
                                                        f"{self.pose_model.config.heads.num_joints} predicted joints")
            self.joint_names, self.joint_flip_pairs = names, pairs
        if self.seg_model is not None:
            names, pairs = default_part_names(self.seg_model.config.heads.num_parts)
            if part_names is not None:
                names, pairs = list(part_names), []
            if len(names) != self.seg_model.config.heads.num_parts:
                raise ConfigurationError("part_names", f"{len(names)} names for "
                                                       f"{self.seg_model.config.heads.num_parts} predicted classes")
            self.part_names, self.part_flip_pairs = names, pairs

    def log_operation(self, operation: str, details: Dict[str, Any]):
        """Log pseudo-labeling operations"""
        self.processing_log.append({
            'timestamp': datetime.now().isoformat(),
            'operation': operation,
            'details': details
        })
        logger.info(f"{operation}: {details.get('summary', 'Operation completed')}")

    def _load(self, checkpoint, task: str):
        model, _ = model_from_checkpoint(checkpoint)
        if task not in model.tasks:
            raise TaskError(f"checkpoint {checkpoint} has no {task} head (heads: {model.tasks})")
        return model.to(self.device).eval()

    def _predict(self, model, manifest: DatasetManifest, task: str):
        """Yield (record index, output tensor) at the model's input resolution"""
        plan = make_sequential_batches(manifest, range(manifest.size), self.batch_size)
        loader = planned_loader(PlannedBatchDataset(plan, {manifest.name: manifest}, model.input_size))
        with torch.inference_mode():
            for batch in loader:
                outputs = model(batch["images"].to(self.device), tasks=[task], with_classifier=False)
                values = outputs["joints"] if task == "pose" else outputs["seg_logits"]
                for index, value in zip(batch["indices"].tolist(), values):
                    yield index, value.cpu()

    def label(self, target, out_dir) -> DatasetManifest:
        manifest = target if isinstance(target, DatasetManifest) else load_manifest(target)
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        sizes = []
        for record in manifest.records:
            with Image.open(manifest.resolve(record.image)) as img:
                sizes.append((img.height, img.width))

        records = [replace(r, image=str(manifest.resolve(r.image).resolve())) for r in manifest.records]
        # the models only need the images
        source = replace(manifest, tasks=[], records=[replace(r, joints=None, mask=None) for r in manifest.records])
        tasks = list(manifest.tasks)

        if self.pose_model is not None:
            input_size = self.pose_model.input_size
            for index, coords in self._predict(self.pose_model, source, "pose"):
                predicted = JointSet(coords.numpy().astype(np.float64), np.ones(len(coords), dtype=bool), 1.0)
                joints = resize_joints(predicted, input_size, sizes[index])
                joints.head_size = head_size_from_joints(joints, self.joint_names, sizes[index][0])
                records[index].joints = joints
            tasks.append("pose")

        if self.seg_model is not None:
            for index, logits in self._predict(self.seg_model, source, "segmentation"):
                upsampled = F.interpolate(logits.unsqueeze(0), size=sizes[index], mode="bilinear", align_corners=False)
                mask_path = out_dir / "masks" / f"{index:06d}.png"
                write_mask(upsampled.argmax(dim=1)[0].numpy().astype(np.uint8), mask_path)
                records[index].mask = str(mask_path.resolve())
            tasks.append("segmentation")

        labelled = DatasetManifest(
            name=f"{manifest.name}_pseudo", tasks=[t for t in TASKS if t in set(tasks)], records=records,
            attribute_schema=manifest.attribute_schema,
            joint_names=self.joint_names if self.pose_model is not None else manifest.joint_names,
            joint_flip_pairs=self.joint_flip_pairs if self.pose_model is not None else manifest.joint_flip_pairs,
            part_names=self.part_names if self.seg_model is not None else manifest.part_names,
            part_flip_pairs=self.part_flip_pairs if self.seg_model is not None else manifest.part_flip_pairs,
            root=out_dir)
        save_manifest(labelled, out_dir / "manifest.json")
        self.log_operation('pseudo_label', {
            'summary': f"Annotated {len(records)} images of '{manifest.name}'"
                       f"{' with joints' if self.pose_model is not None else ''}"
                       f"{' and' if self.pose_model is not None and self.seg_model is not None else ''}"
                       f"{' with part masks' if self.seg_model is not None else ''}",
            'records': len(records),
            'tasks': labelled.tasks,
        })
        return labelled


def pseudo_label(target, out_dir, pose_checkpoint=None, seg_checkpoint=None, device: str = "cpu") -> Path:
    """Annotate `target` and return the path of the written manifest"""
    PseudoLabeler(pose_checkpoint, seg_checkpoint, device).label(target, out_dir)
    return Path(out_dir) / "manifest.json"
