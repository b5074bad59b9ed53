#!/usr/bin/env python3
"""
Person Multi-Task Trainer
Interleaved multi-dataset training, checkpoints, scoped initialization, evaluation and benchmarks
"""

import logging
import math
import pickle
import time
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from backbone import count_parameters
from batch_sampling import (BatchPlan, PlannedBatchDataset, interleave, make_pk_batches, make_random_batches,
                            make_sequential_batches, planned_loader)
from losses import LossBundle, attribute_ce, batch_hard_triplet, bootstrapped_ce, combine, person_ce, pose_l2
from mtl_config import (LOSS_NAMES, LOSS_TASKS, TASKS, BoundsError, CheckpointLoadError, ConfigurationError,
                        EvaluationError, ModelConfig, NonFiniteLossError, TaskError, TrainConfig, save_json,
                        save_train_config)
from person_datasets import MPII_JOINT_NAMES, DatasetManifest, limit_identities, load_manifest
from person_metrics import (MetricReport, RetrievalSet, SegmentationConfusion, attribute_eval, pckh, pckh_by_part,
                            reid_eval)
from person_model import TASK_HEADS, PersonMultiTaskModel, build_model

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
RUN_LOG_COLUMNS = ["step", "dataset"] + list(LOSS_NAMES) + ["total", "lr"]
EVAL_SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# Run log
# ---------------------------------------------------------------------------

@dataclass
class RunLog:
    """Per-step losses plus evaluation snapshots; absent losses stay empty in the CSV"""
    rows: List[Dict[str, Any]] = field(default_factory=list)
    evaluations: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def last_step(self) -> int:
        return self.rows[-1]["step"] if self.rows else 0

    def append(self, step: int, dataset: str, losses: Mapping[str, float], lr: float):
        if self.rows and step <= self.last_step:
            raise BoundsError(f"run log steps must increase: {step} after {self.last_step}")
        row = {"step": step, "dataset": dataset, "lr": lr}
        row.update(losses)
        self.rows.append(row)

    def add_evaluation(self, step: int, report: MetricReport):
        self.evaluations.append({"step": step, "report": report.to_dict()})

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=RUN_LOG_COLUMNS)

    def counts_by_dataset(self) -> Dict[str, int]:
        if not self.rows:
            return {}
        return {str(k): int(v) for k, v in self.to_frame()["dataset"].value_counts().items()}

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path

    @classmethod
    def load(cls, path) -> "RunLog":
        frame = pd.read_csv(path)
        rows = [{k: v for k, v in row.items() if not (isinstance(v, float) and math.isnan(v))}
                for row in frame.to_dict(orient="records")]
        return cls(rows=rows)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: PersonMultiTaskModel, step: int, label_maps: Optional[Dict[str, Dict[str, int]]] = None,
                    optimizer: Optional[torch.optim.Optimizer] = None, scheduler=None,
                    train_config: Optional[TrainConfig] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "label_maps": label_maps or {},
        "step": int(step),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "train_config": train_config.to_dict() if train_config is not None else None,
    }, path)
    return path


def load_checkpoint(path) -> Dict[str, Any]:
    try:
        checkpoint = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as e:
        raise CheckpointLoadError(f"cannot read checkpoint {path}: {e}")
    if not isinstance(checkpoint, dict):
        raise CheckpointLoadError(f"checkpoint {path} does not hold a checkpoint dictionary")
    missing = [key for key in ("model_config", "state_dict", "step") if key not in checkpoint]
    if missing:
        raise CheckpointLoadError(f"checkpoint {path} lacks {missing}")
    return checkpoint


def _config_differences(expected: Mapping[str, Any], found: Mapping[str, Any], prefix: str = "") -> List[str]:
    fields = []
    for key in sorted(set(expected) | set(found)):
        a, b = expected.get(key), found.get(key)
        if isinstance(a, dict) and isinstance(b, dict):
            fields += _config_differences(a, b, f"{prefix}{key}.")
        elif a != b:
            fields.append(f"{prefix}{key}")
    return fields


def model_from_checkpoint(checkpoint: Union[str, Path, Dict[str, Any]],
                          expected_config: Optional[ModelConfig] = None) -> Tuple[PersonMultiTaskModel, Dict[str, Any]]:
    """Rebuild the model a checkpoint was saved from and load its weights"""
    if not isinstance(checkpoint, dict):
        checkpoint = load_checkpoint(checkpoint)
    if expected_config is not None:
        differences = _config_differences(expected_config.to_dict(), checkpoint["model_config"])
        if differences:
            raise CheckpointLoadError(f"checkpoint model config differs in {differences}")
    try:
        config = ModelConfig.from_dict(checkpoint["model_config"])
        model = PersonMultiTaskModel(config)
        model.load_state_dict(checkpoint["state_dict"])
    except (ConfigurationError, TypeError) as e:
        raise CheckpointLoadError(f"checkpoint model config is invalid: {e}")
    except RuntimeError as e:
        raise CheckpointLoadError(f"checkpoint weights do not fit the model: {e}")
    return model, checkpoint


def _scope_keys(keys: Iterable[str], scope: str) -> List[str]:
    if scope == "all":
        return list(keys)
    if scope in TASK_HEADS:
        prefixes = tuple(f"heads.{head}." for head in TASK_HEADS[scope])
    else:
        prefixes = (scope.rstrip(".") + ".",)
    return [k for k in keys if k.startswith(prefixes)]


def init_from_checkpoint(model: PersonMultiTaskModel, checkpoint: Union[str, Path, Dict[str, Any]],
                         scopes: Sequence[str] = ("all",)) -> Dict[str, List[str]]:
    """
    Copy the parameters and buffers of the listed scopes ("all", "backbone", "heads.<name>" or a task name)
    from a checkpoint; everything else keeps its fresh initialization.
    """
    if not isinstance(checkpoint, dict):
        checkpoint = load_checkpoint(checkpoint)
    source = checkpoint["state_dict"]
    target = model.state_dict()
    report: Dict[str, List[str]] = {}
    for scope in scopes:
        keys = _scope_keys(target, scope)
        if not keys:
            raise CheckpointLoadError(f"scope '{scope}' matches no parameter of the model")
        for key in keys:
            if key not in source:
                raise CheckpointLoadError(f"parameter '{key}' (scope '{scope}') missing from checkpoint")
            if tuple(source[key].shape) != tuple(target[key].shape):
                raise CheckpointLoadError(f"parameter '{key}' has shape {tuple(source[key].shape)} in the checkpoint, "
                                          f"{tuple(target[key].shape)} in the model")
            target[key] = source[key].clone()
        report[scope] = keys
    model.load_state_dict(target)
    logger.info(f"Initialized scopes {list(scopes)} ({sum(len(v) for v in report.values())} tensors) from checkpoint")
    return report


# ---------------------------------------------------------------------------
# Footprint and throughput
# ---------------------------------------------------------------------------

def estimate_footprint(model: PersonMultiTaskModel, batch_size: int) -> Dict[str, int]:
    """Parameter count and an activation-element estimate from one forward pass"""
    elements = [0]
    hooks = []

    def count(_module, _inputs, output):
        tensors = output if isinstance(output, (tuple, list)) else [output]
        elements[0] += sum(t.numel() for t in tensors if torch.is_tensor(t))

    for module in model.modules():
        if not list(module.children()):
            hooks.append(module.register_forward_hook(count))
    was_training = model.training
    model.eval()
    try:
        height, width = model.input_size
        with torch.no_grad():
            model(torch.zeros(1, 3, height, width, device=next(model.parameters()).device))
    finally:
        for hook in hooks:
            hook.remove()
        model.train(was_training)
    return {"parameters": count_parameters(model), "activation_elements": elements[0] * batch_size,
            "batch_size": batch_size}


def benchmark_throughput(checkpoint, batch_sizes: Sequence[int] = (1, 10), repeats: int = 20, warmup: int = 3,
                         device: str = "cpu") -> Dict[int, float]:
    """Person crops per second of an inference-mode forward through every head"""
    model, _ = model_from_checkpoint(checkpoint)
    model.to(device).eval()
    height, width = model.input_size
    results = {}
    with torch.inference_mode():
        for batch_size in batch_sizes:
            images = torch.rand(batch_size, 3, height, width, device=device)
            for _ in range(warmup):
                model(images)
            start = time.perf_counter()
            for _ in range(repeats):
                model(images)
            elapsed = time.perf_counter() - start
            results[int(batch_size)] = batch_size * repeats / elapsed if elapsed > 0 else float("inf")
            logger.info(f"Batch size {batch_size}: {results[int(batch_size)]:.1f} crops/s")
    return results


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Path
    run_log: RunLog
    report: Optional[MetricReport] = None


def _dataset_keys(manifests: Sequence[DatasetManifest]) -> List[str]:
    keys = []
    for i, manifest in enumerate(manifests):
        key = manifest.name
        if key in keys:
            key = f"{manifest.name}_{i}"
        keys.append(key)
    return keys


class PersonMultiTaskTrainer:
    """
    Walks one interleaved BatchPlan; every step is a single-dataset batch that only runs and
    optimizes the heads of that dataset's active losses.
    """

    def __init__(self, config: TrainConfig, run_dir, device: str = "cpu"):
        self.config = config
        self.run_dir = Path(run_dir)
        self.device = torch.device(device)
        self.processing_log: List[Dict[str, Any]] = []
        self.manifests: Dict[str, DatasetManifest] = {}
        self.entries = {}
        self.label_maps: Dict[str, Dict[str, int]] = {}
        self.plan: Optional[BatchPlan] = None
        self.model: Optional[PersonMultiTaskModel] = None
        self.optimizer = None
        self.scheduler = None
        self.run_log = RunLog()

    def log_operation(self, operation: str, details: Dict[str, Any]):
        """Log training operations"""
        self.processing_log.append({
            'timestamp': datetime.now().isoformat(),
            'operation': operation,
            'details': details
        })
        logger.info(f"{operation}: {details.get('summary', 'Operation completed')}")

    # -- setup ---------------------------------------------------------------

    def prepare(self, limit_identities_to: Optional[int] = None):
        """Load manifests, check every loss against its dataset's task flags, build model and plan"""
        if limit_identities_to is not None:
            self.config.limit_identities = limit_identities_to
        config = self.config.validate()
        manifests = [load_manifest(entry.manifest) for entry in config.datasets]
        if config.limit_identities is not None:
            manifests = [limit_identities(m, config.limit_identities, config.seed) if m.has_task("reid") else m
                         for m in manifests]
        keys = _dataset_keys(manifests)
        self.manifests = dict(zip(keys, manifests))
        self.entries = dict(zip(keys, config.datasets))
        self._check_tasks()
        self._fit_heads_to_data()

        torch.manual_seed(config.seed)
        self.model = build_model(config.model).to(self.device)
        if config.init_checkpoint:
            report = init_from_checkpoint(self.model, config.init_checkpoint, config.init_scopes)
            self.log_operation('init_from_checkpoint', {
                'summary': f"Loaded scopes {list(report)} from {config.init_checkpoint}",
                'scopes': {scope: len(keys) for scope, keys in report.items()},
            })

        batch_size = max(entry.pk_p * entry.pk_k if entry.uses_pk else entry.batch_size
                         for entry in config.datasets)
        footprint = estimate_footprint(self.model, batch_size)
        self.log_operation('estimate_footprint', {
            'summary': f"{footprint['parameters']:,} parameters, ~{footprint['activation_elements']:,} "
                       f"activation elements at batch size {batch_size}",
            **footprint,
            'parameter_report': self.model.parameter_report(),
        })

        optimizer_cfg = config.optimizer
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=optimizer_cfg.lr,
                                          betas=(optimizer_cfg.beta1, optimizer_cfg.beta2),
                                          eps=optimizer_cfg.eps, weight_decay=optimizer_cfg.weight_decay)
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(self.optimizer, self.lr_factor)
        self.plan = self.build_plan()
        return self

    def _check_tasks(self):
        for key, entry in self.entries.items():
            manifest = self.manifests[key]
            for loss_name in entry.losses:
                task = LOSS_TASKS[loss_name]
                if not manifest.has_task(task):
                    raise ConfigurationError(
                        "losses", f"loss '{loss_name}' needs '{task}' labels but dataset '{key}' "
                                  f"only provides {manifest.tasks}")

    def _fit_heads_to_data(self):
        """Fill data-dependent head sizes and reject conflicting ones"""
        heads = self.config.model.heads
        person_keys = []
        for key, entry in self.entries.items():
            manifest = self.manifests[key]
            if "person_ce" in entry.losses:
                person_keys += [f"{key}:{pid}" for pid in manifest.identities(entry.split)]
            if "attribute_ce" in entry.losses:
                if len(heads.attribute_schema) == 0:
                    heads.attribute_schema = manifest.attribute_schema
                elif heads.attribute_schema.names != manifest.attribute_schema.names:
                    raise ConfigurationError("attribute_schema",
                                             f"dataset '{key}' attributes {manifest.attribute_schema.names} differ "
                                             f"from the model's {heads.attribute_schema.names}")
            if "pose_l2" in entry.losses and manifest.num_joints != heads.num_joints:
                raise ConfigurationError("num_joints", f"dataset '{key}' has {manifest.num_joints} joints, "
                                                       f"the model {heads.num_joints}")
            if "seg_bce" in entry.losses and manifest.num_parts != heads.num_parts:
                raise ConfigurationError("num_parts", f"dataset '{key}' has {manifest.num_parts} part classes, "
                                                      f"the model {heads.num_parts}")
        if person_keys:
            self.label_maps["person"] = {name: i for i, name in enumerate(person_keys)}
            heads.num_persons = len(person_keys)
        self.config.model.validate()

    def build_plan(self) -> BatchPlan:
        config = self.config
        steps = max(config.total_steps, 1)
        fragments, sizes = {}, {}
        for i, (key, entry) in enumerate(self.entries.items()):
            manifest = self.manifests[key]
            seed = config.seed * 1000 + i + 1
            if entry.uses_pk:
                fragments[key] = make_pk_batches(manifest, entry.pk_p, entry.pk_k, seed, steps, entry.split, key)
            else:
                fragments[key] = make_random_batches(manifest, entry.batch_size, seed, steps, entry.split, key)
            sizes[key] = len(manifest.indices(entry.split))
        plan = interleave(fragments, sizes, config.seed, num_steps=config.total_steps)
        self.log_operation('build_plan', {
            'summary': f"{len(plan)} steps over {len(fragments)} dataset(s): {plan.counts_by_dataset()}",
            'counts': plan.counts_by_dataset(),
            'sizes': sizes,
        })
        return plan

    def lr_factor(self, step: int) -> float:
        """Constant, then exponential decay to final_fraction over the last part of training"""
        schedule = self.config.schedule
        total = self.config.total_steps
        start = schedule.decay_start_fraction * total
        if schedule.decay_kind == "none" or step < start or total <= start:
            return 1.0
        progress = min(1.0, (step - start) / (total - start))
        return schedule.final_fraction ** progress

    # -- training ------------------------------------------------------------

    def compute_losses(self, key: str, batch: Mapping[str, Any], outputs: Mapping[str, Any]) -> LossBundle:
        config = self.config
        parts: Dict[str, Optional[torch.Tensor]] = {}
        for loss_name in self.entries[key].losses:
            if loss_name == "triplet":
                parts[loss_name] = batch_hard_triplet(outputs["embedding"], batch["person_ids"],
                                                      config.triplet_margin_mode, config.triplet_margin)
            elif loss_name == "person_ce":
                labels = torch.tensor([self.label_maps["person"][f"{key}:{int(pid)}"] for pid in batch["person_ids"]],
                                      dtype=torch.long, device=self.device)
                parts[loss_name] = person_ce(outputs["person_logits"], labels)
            elif loss_name == "attribute_ce":
                parts[loss_name] = attribute_ce(outputs["attribute_logits"], batch["attributes"])
            elif loss_name == "pose_l2":
                height, width = self.model.input_size
                parts[loss_name] = pose_l2(outputs["joints"], batch["joints"], batch["visible"],
                                           normalizer=math.hypot(height, width))
            elif loss_name == "seg_bce":
                parts[loss_name] = bootstrapped_ce(outputs["seg_logits"], batch["mask"], config.keep_fraction)
        return combine(parts, config.loss_weights)

    def _to_device(self, batch: Dict[str, Any]) -> Dict[str, Any]:
        moved = {}
        for key, value in batch.items():
            if torch.is_tensor(value):
                moved[key] = value.to(self.device)
            elif isinstance(value, dict):
                moved[key] = {k: v.to(self.device) for k, v in value.items()}
            else:
                moved[key] = value
        return moved

    def train_step(self, step: int, batch: Dict[str, Any]) -> LossBundle:
        key = batch["dataset"]
        losses = self.entries[key].losses
        tasks = [t for t in TASKS if t in {LOSS_TASKS[name] for name in losses}]
        self.model.train()
        outputs = self.model(batch["images"], tasks=tasks, with_classifier="person_ce" in losses)
        bundle = self.compute_losses(key, batch, outputs)
        for name, value in bundle.losses.items():
            if not torch.isfinite(value):
                logger.error(f"Aborting: loss '{name}' is {float(value)} at step {step} on '{key}'")
                raise NonFiniteLossError(step, key, name, float(value))
        self.optimizer.zero_grad(set_to_none=True)
        if bundle.total is not None:
            bundle.total.backward()
            self.optimizer.step()
        self.scheduler.step()
        return bundle

    def resume(self, checkpoint_path) -> int:
        checkpoint = load_checkpoint(checkpoint_path)
        differences = _config_differences(self.model.config.to_dict(), checkpoint["model_config"])
        if differences:
            raise CheckpointLoadError(f"cannot resume: model config differs in {differences}")
        self.model.load_state_dict(checkpoint["state_dict"])
        if checkpoint.get("optimizer"):
            self.optimizer.load_state_dict(checkpoint["optimizer"])
        if checkpoint.get("scheduler"):
            self.scheduler.load_state_dict(checkpoint["scheduler"])
        run_log_path = self.run_dir / "run_log.csv"
        if run_log_path.exists():
            self.run_log = RunLog.load(run_log_path)
            self.run_log.rows = [row for row in self.run_log.rows if row["step"] <= checkpoint["step"]]
        self.log_operation('resume', {'summary': f"Resumed from {checkpoint_path} at step {checkpoint['step']}",
                                      'step': checkpoint["step"]})
        return int(checkpoint["step"])

    def checkpoint(self, step: int, name: Optional[str] = None) -> Path:
        path = self.run_dir / "checkpoints" / (name or f"step_{step:06d}.pt")
        return save_checkpoint(path, self.model, step, self.label_maps, self.optimizer, self.scheduler, self.config)

    def train(self, resume_from=None) -> TrainResult:
        if self.model is None:
            self.prepare()
        config = self.config
        self.run_dir.mkdir(parents=True, exist_ok=True)
        save_train_config(config, self.run_dir / "resolved_config.json")
        start = self.resume(resume_from) if resume_from else 0

        remaining = BatchPlan(self.plan.batches[start:])
        dataset = PlannedBatchDataset(
            remaining, self.manifests, self.model.input_size,
            augmentations={key: entry.augmentation for key, entry in self.entries.items()},
            affine_datasets=[key for key, entry in self.entries.items()
                             if set(entry.losses) <= {"pose_l2", "seg_bce"}],
            seed=config.seed, step_offset=start)
        self.log_operation('train_start', {
            'summary': f"Training steps {start + 1}..{config.total_steps} on {list(self.manifests)}",
            'start_step': start,
            'total_steps': config.total_steps,
        })

        step = start
        for batch in planned_loader(dataset, config.num_workers):
            step += 1
            batch = self._to_device(batch)
            lr = self.optimizer.param_groups[0]["lr"]
            bundle = self.train_step(step, batch)
            self.run_log.append(step, batch["dataset"], bundle.values(), lr)
            if (config.log_every and step % config.log_every == 0) or step == config.total_steps:
                parts = ", ".join(f"{k}={v:.4f}" for k, v in bundle.values().items())
                logger.info(f"Step {step}/{config.total_steps} [{batch['dataset']}] {parts}, lr={lr:.2e}")
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                self.checkpoint(step)

        final = self.checkpoint(step, "final.pt")
        self.run_log.save(self.run_dir / "run_log.csv")

        report = None
        if config.eval_manifest:
            report = evaluate(final, config.eval_manifest, config.eval_tasks, config.eval_split, device=str(self.device))
            report.meta["train_identities"] = sum(
                self.manifests[key].identity_count(entry.split) for key, entry in self.entries.items()
                if self.manifests[key].has_task("reid"))
            report.meta["run_group"] = config.run_group
            self.run_log.add_evaluation(step, report)
            report.to_json(self.run_dir / "metrics.json")
            report.to_csv(self.run_dir / "metrics.csv")
        self.log_operation('train_complete', {
            'summary': f"Finished at step {step}; final checkpoint {final}",
            'steps': step,
            'counts': self.run_log.counts_by_dataset(),
        })
        save_json({'processing_log': self.processing_log, 'evaluations': self.run_log.evaluations},
                  self.run_dir / "processing_log.json")
        return TrainResult(final, self.run_log, report)


def train(config: TrainConfig, run_dir, limit_identities_to: Optional[int] = None, resume_from=None,
          device: str = "cpu") -> TrainResult:
    trainer = PersonMultiTaskTrainer(config, run_dir, device)
    trainer.prepare(limit_identities_to)
    return trainer.train(resume_from)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvaluationSelection:
    indices: List[int]
    # records scored by the pose, segmentation and attribute metrics
    scored: List[int]
    retrieval_protocol: bool


def select_records(manifest: DatasetManifest, split: Optional[str]) -> EvaluationSelection:
    """
    split None: ReID on query/gallery when both exist, other tasks on val (else train);
    "train"/"val": every task on that split, ReID leave-one-out; "test": query + gallery.
    """
    has_test = bool(manifest.indices("query")) and bool(manifest.indices("gallery"))
    if split is None:
        own = manifest.indices("val") or manifest.indices("train")
        if manifest.has_task("reid") and has_test:
            test = manifest.indices("query") + manifest.indices("gallery")
            return EvaluationSelection(test + own, own or test, True)
        return EvaluationSelection(own, own, False)
    if split not in EVAL_SPLITS:
        raise ConfigurationError("eval_split", f"unknown split {split!r} (expected one of {list(EVAL_SPLITS)})")
    if split == "test":
        if not has_test:
            raise EvaluationError(f"manifest '{manifest.name}' has no query/gallery records")
        test = manifest.indices("query") + manifest.indices("gallery")
        return EvaluationSelection(test, test, True)
    own = manifest.indices(split)
    return EvaluationSelection(own, own, False)


def evaluate(checkpoint, manifest, tasks: Optional[Sequence[str]] = None, split: Optional[str] = None,
             batch_size: int = 32, device: str = "cpu") -> MetricReport:
    """Inference-mode metrics of a checkpoint on a manifest; see select_records for the split rules"""
    model, ckpt = model_from_checkpoint(checkpoint)
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    requested = list(tasks) if tasks else [t for t in model.tasks if manifest.has_task(t)]
    unsupported = [t for t in requested if t not in model.tasks]
    if unsupported:
        raise TaskError(f"checkpoint has no head for {unsupported} (heads: {model.tasks})")
    unlabelled = [t for t in requested if not manifest.has_task(t)]
    if unlabelled:
        raise TaskError(f"manifest '{manifest.name}' has no labels for {unlabelled}")
    if not requested:
        raise TaskError("nothing to evaluate: no task shared by checkpoint and manifest")
    requested = [t for t in TASKS if t in requested]

    selection = select_records(manifest, split)
    if not selection.indices:
        raise EvaluationError(f"no records to evaluate in manifest '{manifest.name}' (split {split!r})")
    scored = set(selection.scored)
    model.to(device).eval()
    plan = make_sequential_batches(manifest, selection.indices, batch_size)
    loader = planned_loader(PlannedBatchDataset(plan, {manifest.name: manifest}, model.input_size))

    embeddings, embedding_records = [], []
    scored_records: List[int] = []
    attribute_scores: Dict[str, List[np.ndarray]] = {}
    pose_pred, pose_gt, pose_visible, pose_heads = [], [], [], []
    confusion = SegmentationConfusion(model.config.heads.num_parts) if "segmentation" in requested else None
    with torch.inference_mode():
        for batch in loader:
            outputs = model(batch["images"].to(device), tasks=requested, with_classifier=False)
            batch_indices = batch["indices"].tolist()
            keep = np.array([i in scored for i in batch_indices])
            scored_records += [i for i in batch_indices if i in scored]
            if "reid" in requested:
                embeddings.append(outputs["embedding"].cpu().numpy())
                embedding_records += batch_indices
            if "attributes" in requested:
                for name, logits in outputs["attribute_logits"].items():
                    attribute_scores.setdefault(name, []).append(logits.cpu().numpy()[keep])
            if "pose" in requested:
                pose_pred.append(outputs["joints"].cpu().numpy()[keep])
                pose_gt.append(batch["joints"].numpy()[keep])
                pose_visible.append(batch["visible"].numpy()[keep])
                pose_heads.append(batch["head_size"].numpy()[keep])
            if confusion is not None and keep.any():
                confusion.update(outputs["seg_logits"].argmax(dim=1).cpu().numpy()[keep], batch["mask"].numpy()[keep])

    report = MetricReport(meta={"checkpoint": None if isinstance(checkpoint, dict) else str(checkpoint),
                                "manifest": manifest.name, "split": split or "auto", "step": int(ckpt["step"]),
                                "tasks": ",".join(requested)})
    if "reid" in requested:
        records = [manifest.records[i] for i in embedding_records]
        report.reid = _evaluate_reid(np.concatenate(embeddings), records, selection.retrieval_protocol)
    if "attributes" in requested:
        schema = model.config.heads.attribute_schema
        scores = {name: np.concatenate(chunks) for name, chunks in attribute_scores.items()}
        labels = {name: np.array([(manifest.records[i].attributes or {}).get(name, -1) for i in scored_records])
                  for name in schema.names}
        report.attributes = attribute_eval(scores, labels, schema)
    if "pose" in requested:
        result = pckh(np.concatenate(pose_pred), np.concatenate(pose_gt),
                      visible=np.concatenate(pose_visible), head_sizes=np.concatenate(pose_heads))
        if manifest.joint_names:
            result["joint_names"] = list(manifest.joint_names)
            if set(manifest.joint_names) == set(MPII_JOINT_NAMES):
                result["by_part"] = pckh_by_part(result, manifest.joint_names)
        report.pose = result
    if confusion is not None:
        report.segmentation = confusion.result(manifest.part_names or None)
    logger.info(f"Evaluated {len(selection.indices)} records of '{manifest.name}': {report.flat_row()}")
    return report


def _evaluate_reid(embeddings: np.ndarray, records, retrieval_protocol: bool) -> Dict[str, Any]:
    ids = np.array([r.person_id for r in records])
    # images without a camera id get a unique one so only the image itself is filtered
    cams = np.array([r.camera_id if r.camera_id is not None else 1_000_000 + i for i, r in enumerate(records)])
    if retrieval_protocol:
        query = np.array([r.split == "query" for r in records])
        gallery = np.array([r.split == "gallery" for r in records])
        retrieval = RetrievalSet(embeddings[query], ids[query], cams[query],
                                 embeddings[gallery], ids[gallery], cams[gallery])
        return reid_eval(retrieval)
    retrieval = RetrievalSet(embeddings, ids, cams, embeddings, ids, cams)
    return reid_eval(retrieval, exclude_self=True)
