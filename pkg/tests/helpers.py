#!/usr/bin/env python3
"""
Small configs and datasets shared by the test modules
"""

import json
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image

from mtl_config import (BackboneConfig, DatasetEntry, HeadConfig, ModelConfig, NormKind, TrainConfig, Topology,
                        save_json)
from synthetic_people import generate_synthetic, synthetic_attribute_schema

TINY_SIZE = (64, 32)


def tiny_backbone(topology: Topology = Topology.SINGLE_BRANCH, num_branches: int = 1,
                  norm_kind: NormKind = NormKind.GROUP, height: int = 64, width: int = 32) -> BackboneConfig:
    return BackboneConfig(topology=topology, stage_channels=[8, 16, 16], blocks_per_stage=[1, 1, 1],
                          final_channels=32, final_blocks=1, norm_kind=norm_kind, norm_groups=4,
                          num_branches=num_branches, split_channels=16, input_height=height, input_width=width,
                          total_stride=16)


def tiny_model_config(tasks: Optional[List[str]] = None, topology: Topology = Topology.SINGLE_BRANCH,
                      num_branches: int = 1, num_persons: Optional[int] = 4) -> ModelConfig:
    tasks = tasks or ["reid", "attributes", "pose", "segmentation"]
    heads = HeadConfig(tasks=tasks, num_persons=num_persons if "reid" in tasks else None,
                       attribute_schema=synthetic_attribute_schema() if "attributes" in tasks else [],
                       num_joints=16, num_parts=5, head_channels=8)
    return ModelConfig(backbone=tiny_backbone(topology, num_branches), heads=heads)


def tiny_synthetic(out_dir, num_ids: int = 4, samples_per_id: int = 4, holdout: int = 0, seed: int = 0) -> Path:
    return generate_synthetic(Path(out_dir), num_ids, samples_per_id, TINY_SIZE, seed, holdout)


def tiny_train_config(manifest_path, total_steps: int = 3, losses: Optional[List[str]] = None,
                      eval_manifest: Optional[str] = None) -> TrainConfig:
    entry = DatasetEntry(manifest=str(manifest_path),
                         losses=losses or ["triplet", "person_ce", "attribute_ce", "pose_l2", "seg_bce"],
                         pk_p=2, pk_k=2, batch_size=4)
    config = TrainConfig(model=tiny_model_config(num_persons=None), datasets=[entry], total_steps=total_steps,
                         checkpoint_every=2, log_every=1, eval_manifest=eval_manifest)
    return config


def write_config(config: TrainConfig, path) -> Path:
    return save_json(config.to_dict(), path)


def write_image(path, height: int = 16, width: int = 8, value: int = 128) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((height, width, 3), value, dtype=np.uint8), mode="RGB").save(path)
    return path


def write_manifest(path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f)
    return path
