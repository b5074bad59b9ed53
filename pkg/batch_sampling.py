#!/usr/bin/env python3
"""
Batch Sampling
PK batch composition, proportional interleaving of whole per-dataset batches, and a torch Dataset
that materializes a fixed BatchPlan in order
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from mtl_config import DISTRACTOR_ID, JUNK_ID, MISSING_LABEL, AugmentationConfig, CompositionError, ConfigurationError
from person_datasets import DatasetManifest, augment, load_sample

logger = logging.getLogger(__name__)


@dataclass
class PlannedBatch:
    dataset: str
    indices: List[int]
    pk: Optional[Tuple[int, int]] = None

    def __len__(self):
        return len(self.indices)


@dataclass
class BatchPlan:
    batches: List[PlannedBatch] = field(default_factory=list)

    def __len__(self):
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)

    def __getitem__(self, step: int) -> PlannedBatch:
        return self.batches[step]

    def counts_by_dataset(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for batch in self.batches:
            counts[batch.dataset] = counts.get(batch.dataset, 0) + 1
        return counts


def identity_index(manifest: DatasetManifest, split: Optional[str] = "train") -> Dict[int, List[int]]:
    """Record indices per real identity (junk and distractor ids skipped)"""
    groups: Dict[int, List[int]] = {}
    for index, record in enumerate(manifest.records):
        if split is not None and record.split != split:
            continue
        if record.person_id is None or record.person_id in (JUNK_ID, DISTRACTOR_ID):
            continue
        groups.setdefault(record.person_id, []).append(index)
    return groups


def make_pk_batches(manifest: DatasetManifest, p: int, k: int, seed: int, num_batches: Optional[int] = None,
                    split: Optional[str] = "train", name: Optional[str] = None) -> BatchPlan:
    """
    Batches of P distinct identities with K samples each.

    Identities are visited in seeded random permutations so every identity appears equally often;
    an identity with fewer than K samples contributes all of them plus draws with replacement.
    """
    if p < 2 or k < 1:
        raise CompositionError(f"PK batches need P >= 2 and K >= 1, got P={p}, K={k}")
    groups = identity_index(manifest, split)
    identities = sorted(groups)
    if len(identities) < p:
        raise CompositionError(f"'{manifest.name}' has {len(identities)} identities in split {split!r}, "
                               f"a PK batch needs P={p}")
    rng = np.random.default_rng(seed)
    if num_batches is None:
        num_batches = max(1, len(identities) // p)

    queue: deque = deque()
    batches = []
    for _ in range(num_batches):
        chosen: List[int] = []
        deferred: List[int] = []
        while len(chosen) < p:
            if not queue:
                queue.extend(rng.permutation(identities).tolist())
            pid = queue.popleft()
            if pid in chosen:
                deferred.append(pid)
            else:
                chosen.append(pid)
        # ids that collided at a permutation boundary go first next time
        queue.extendleft(reversed(deferred))

        indices: List[int] = []
        for pid in chosen:
            pool = groups[pid]
            if len(pool) >= k:
                picks = rng.choice(pool, size=k, replace=False).tolist()
            else:
                picks = list(pool) + rng.choice(pool, size=k - len(pool), replace=True).tolist()
            indices.extend(int(i) for i in picks)
        batches.append(PlannedBatch(name or manifest.name, indices, pk=(p, k)))
    return BatchPlan(batches)


def make_random_batches(manifest: DatasetManifest, batch_size: int, seed: int, num_batches: Optional[int] = None,
                        split: Optional[str] = "train", name: Optional[str] = None) -> BatchPlan:
    """Plain shuffled batches, reshuffling whenever the split is exhausted"""
    pool = manifest.indices(split)
    if not pool:
        raise CompositionError(f"'{manifest.name}' has no records in split {split!r}")
    if batch_size <= 0:
        raise ConfigurationError("batch_size", "must be positive")
    batch_size = min(batch_size, len(pool))
    rng = np.random.default_rng(seed)
    if num_batches is None:
        num_batches = max(1, len(pool) // batch_size)
    queue: deque = deque()
    batches = []
    for _ in range(num_batches):
        indices = []
        while len(indices) < batch_size:
            if not queue:
                queue.extend(rng.permutation(pool).tolist())
            indices.append(int(queue.popleft()))
        batches.append(PlannedBatch(name or manifest.name, indices))
    return BatchPlan(batches)


def make_sequential_batches(manifest: DatasetManifest, indices: Sequence[int], batch_size: int,
                            name: Optional[str] = None) -> BatchPlan:
    indices = list(indices)
    return BatchPlan([PlannedBatch(name or manifest.name, indices[i:i + batch_size])
                      for i in range(0, len(indices), batch_size)])


def interleave(fragments: Mapping[str, BatchPlan], sizes: Mapping[str, int], seed: int,
               num_steps: Optional[int] = None) -> BatchPlan:
    """
    One plan of whole batches; each step picks a dataset with probability size / total size.

    Each fragment is consumed in order and restarts from its first batch when exhausted.
    """
    names = list(fragments)
    if not names:
        raise CompositionError("interleave needs at least one dataset")
    missing = [n for n in names if n not in sizes]
    if missing:
        raise ConfigurationError("sizes", f"no size given for {missing}")
    empty = [n for n in names if len(fragments[n]) == 0]
    if empty:
        raise CompositionError(f"empty batch plans for {empty}")
    weights = np.array([float(sizes[n]) for n in names])
    if (weights <= 0).any():
        raise ConfigurationError("sizes", "dataset sizes must be positive")
    if num_steps is None:
        num_steps = sum(len(fragments[n]) for n in names)

    rng = np.random.default_rng(seed)
    choices = rng.choice(len(names), size=num_steps, p=weights / weights.sum())
    cursors = {n: 0 for n in names}
    batches = []
    for choice in choices:
        name = names[int(choice)]
        fragment = fragments[name]
        batches.append(fragment[cursors[name] % len(fragment)])
        cursors[name] += 1
    return BatchPlan(batches)


# ---------------------------------------------------------------------------
# Materializing batches
# ---------------------------------------------------------------------------

def images_to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    """(H, W, 3) uint8 arrays -> (B, 3, H, W) float tensor in [0, 1]"""
    stacked = np.stack(images).astype(np.float32) / 255.0
    return torch.from_numpy(stacked).permute(0, 3, 1, 2).contiguous()


class PlannedBatchDataset(Dataset):
    """
    Item i is the fully collated batch for step i of the plan.

    Used with DataLoader(batch_size=None) so worker processes may prefetch while the emitted
    order stays the plan order. Augmentation randomness depends only on (seed, step, position);
    step_offset is the global step of item 0 when a resumed run materializes the rest of a plan.
    """

    def __init__(self, plan: BatchPlan, manifests: Mapping[str, DatasetManifest], input_size: Tuple[int, int],
                 augmentations: Optional[Mapping[str, AugmentationConfig]] = None,
                 affine_datasets: Sequence[str] = (), seed: int = 0, step_offset: int = 0):
        self.plan = plan
        self.manifests = dict(manifests)
        self.input_size = tuple(input_size)
        self.augmentations = dict(augmentations or {})
        self.affine_datasets = set(affine_datasets)
        self.seed = seed
        self.step_offset = step_offset
        unknown = sorted({b.dataset for b in plan} - set(self.manifests))
        if unknown:
            raise ConfigurationError("datasets", f"plan references unknown datasets {unknown}")

    def __len__(self):
        return len(self.plan)

    def __getitem__(self, step: int) -> Dict[str, object]:
        planned = self.plan[step]
        manifest = self.manifests[planned.dataset]
        config = self.augmentations.get(planned.dataset)
        samples = []
        for position, index in enumerate(planned.indices):
            contents = load_sample(manifest, index, self.input_size)
            if config is not None and config.enabled:
                rng = np.random.default_rng([self.seed, step + self.step_offset, position])
                contents = augment(contents, config, rng, manifest.joint_flip_pairs, manifest.part_flip_pairs,
                                   allow_affine=planned.dataset in self.affine_datasets)
            samples.append(contents)
        return collate(manifest, planned, samples)


def collate(manifest: DatasetManifest, planned: PlannedBatch, samples) -> Dict[str, object]:
    records = [manifest.records[i] for i in planned.indices]
    batch: Dict[str, object] = {
        "dataset": planned.dataset,
        "indices": torch.tensor(planned.indices, dtype=torch.long),
        "images": images_to_tensor([s.image for s in samples]),
    }
    if manifest.has_task("reid"):
        batch["person_ids"] = torch.tensor([r.person_id for r in records], dtype=torch.long)
    if any(r.camera_id is not None for r in records):
        batch["camera_ids"] = torch.tensor([r.camera_id if r.camera_id is not None else -1 for r in records],
                                           dtype=torch.long)
    if manifest.has_task("attributes"):
        batch["attributes"] = {
            name: torch.tensor([(r.attributes or {}).get(name, MISSING_LABEL) for r in records], dtype=torch.long)
            for name in manifest.attribute_schema.names
        }
    if manifest.has_task("pose"):
        batch["joints"] = torch.from_numpy(np.stack([s.joints.coords for s in samples]).astype(np.float32))
        batch["visible"] = torch.from_numpy(np.stack([s.joints.visible for s in samples]))
        batch["head_size"] = torch.tensor([s.joints.head_size for s in samples], dtype=torch.float32)
    if manifest.has_task("segmentation"):
        batch["mask"] = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.int64))
    return batch


def planned_loader(dataset: PlannedBatchDataset, num_workers: int = 0) -> DataLoader:
    """Ordered loader over a PlannedBatchDataset (one plan step per item)"""
    return DataLoader(dataset, batch_size=None, shuffle=False, num_workers=num_workers)
