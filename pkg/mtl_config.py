#!/usr/bin/env python3
"""
Person Multi-Task Configuration
Config dataclasses, error types and logging setup shared by every module
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

logger = logging.getLogger(__name__)

DEFAULT_RUN_ROOT = "runs"
RUN_ROOT_ENV = "PERSON_MTL_RUN_ROOT"
LOG_LEVEL_ENV = "PERSON_MTL_LOG_LEVEL"

TASKS = ("reid", "attributes", "pose", "segmentation")
LOSS_NAMES = ("triplet", "person_ce", "attribute_ce", "pose_l2", "seg_bce")

# Dataset task flag each loss needs
LOSS_TASKS = {
    "triplet": "reid",
    "person_ce": "reid",
    "attribute_ce": "attributes",
    "pose_l2": "pose",
    "seg_bce": "segmentation",
}

SPLITS = ("train", "query", "gallery", "val")
MISSING_LABEL = -1
IGNORE_LABEL = 255
JUNK_ID = -1
DISTRACTOR_ID = 0


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class PersonMTLError(Exception):
    """Base class for every error raised by this project"""


class ConfigurationError(PersonMTLError, ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


class ShapeError(PersonMTLError, ValueError):
    pass


class BoundsError(PersonMTLError, IndexError):
    pass


class CompositionError(PersonMTLError, ValueError):
    pass


class LabelError(PersonMTLError, ValueError):
    pass


class MappingError(PersonMTLError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ManifestError(PersonMTLError, ValueError):
    def __init__(self, message: str, record_index: Optional[int] = None, field_name: Optional[str] = None):
        self.record_index = record_index
        self.field = field_name
        location = ""
        if record_index is not None:
            location = f"record {record_index}"
            if field_name:
                location += f", field '{field_name}'"
            location += ": "
        elif field_name:
            location = f"field '{field_name}': "
        super().__init__(f"{location}{message}")


class CheckpointLoadError(PersonMTLError, RuntimeError):
    pass


class TaskError(PersonMTLError, ValueError):
    pass


class EvaluationError(PersonMTLError, ValueError):
    pass


class NonFiniteLossError(PersonMTLError, FloatingPointError):
    def __init__(self, step: int, dataset: str, loss_name: str, value: float):
        self.step = step
        self.dataset = dataset
        self.loss_name = loss_name
        super().__init__(f"non-finite loss '{loss_name}'={value} at step {step} on dataset '{dataset}'")


class ConversionError(PersonMTLError, FileNotFoundError):
    def __init__(self, layout: str, missing: List[str]):
        self.layout = layout
        self.missing = list(missing)
        listing = "\n  - ".join(self.missing)
        super().__init__(f"{layout} layout is incomplete, missing:\n  - {listing}")


# ---------------------------------------------------------------------------
# Enums
# ---------------------------------------------------------------------------

class Topology(str, Enum):
    SINGLE_BRANCH = "single"
    MULTI_BRANCH = "multi"
    SPLIT_OUTPUT = "split"


class NormKind(str, Enum):
    GROUP = "group"
    BATCH = "batch"


class MarginMode(str, Enum):
    SOFTPLUS = "softplus"
    HINGE = "hinge"


def _coerce_enum(enum_cls, value, field_name: str):
    if isinstance(value, enum_cls):
        return value
    try:
        return enum_cls(value)
    except ValueError:
        choices = ", ".join(member.value for member in enum_cls)
        raise ConfigurationError(field_name, f"unknown value {value!r} (expected one of {choices})")


# ---------------------------------------------------------------------------
# Attribute schema
# ---------------------------------------------------------------------------

@dataclass
class AttributeSpec:
    name: str
    num_classes: int
    class_names: Optional[List[str]] = None
    is_color: bool = False


@dataclass
class AttributeSchema:
    """Ordered attribute list; every attribute is single-label multi-class"""
    attributes: List[AttributeSpec] = field(default_factory=list)

    def __post_init__(self):
        self.attributes = [a if isinstance(a, AttributeSpec) else AttributeSpec(**a) for a in self.attributes]
        self.validate()

    def validate(self):
        names = [a.name for a in self.attributes]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ConfigurationError("attribute_schema", f"duplicate attribute names {duplicates}")
        for spec in self.attributes:
            if spec.num_classes < 2:
                raise ConfigurationError("attribute_schema", f"attribute '{spec.name}' needs at least 2 classes")
            if spec.class_names is not None and len(spec.class_names) != spec.num_classes:
                raise ConfigurationError("attribute_schema", f"attribute '{spec.name}' class_names length mismatch")

    @property
    def names(self) -> List[str]:
        return [a.name for a in self.attributes]

    def get(self, name: str) -> AttributeSpec:
        for spec in self.attributes:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def __len__(self):
        return len(self.attributes)

    def to_list(self) -> List[Dict[str, Any]]:
        return [asdict(a) for a in self.attributes]

    @classmethod
    def from_list(cls, items: Optional[List[Dict[str, Any]]]) -> "AttributeSchema":
        return cls([AttributeSpec(**item) for item in (items or [])])


def market_attribute_schema(include_colors: bool = False) -> AttributeSchema:
    """Market-1501 attribute extension: ten attributes plus two colour attributes"""
    specs = [
        AttributeSpec("gender", 2, ["male", "female"]),
        AttributeSpec("age", 4, ["young", "teenager", "adult", "old"]),
        AttributeSpec("hair", 2, ["short", "long"]),
        AttributeSpec("sleeve_length", 2, ["long", "short"]),
        AttributeSpec("lower_length", 2, ["long", "short"]),
        AttributeSpec("lower_type", 2, ["dress", "pants"]),
        AttributeSpec("backpack", 2, ["no", "yes"]),
        AttributeSpec("handbag", 2, ["no", "yes"]),
        AttributeSpec("bag", 2, ["no", "yes"]),
        AttributeSpec("hat", 2, ["no", "yes"]),
    ]
    if include_colors:
        specs.append(AttributeSpec("upper_color", 8, is_color=True))
        specs.append(AttributeSpec("lower_color", 9, is_color=True))
    return AttributeSchema(specs)


# ---------------------------------------------------------------------------
# Model configuration
# ---------------------------------------------------------------------------

@dataclass
class BackboneConfig:
    topology: Topology = Topology.SINGLE_BRANCH
    stage_channels: List[int] = field(default_factory=lambda: [16, 32, 64])
    blocks_per_stage: List[int] = field(default_factory=lambda: [1, 1, 1])
    final_channels: int = 128
    final_blocks: int = 1
    norm_kind: NormKind = NormKind.GROUP
    norm_groups: int = 8
    num_branches: int = 1
    split_channels: int = 16
    input_height: int = 128
    input_width: int = 64
    total_stride: int = 16
    input_mean: List[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])
    input_std: List[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])

    def __post_init__(self):
        self.topology = _coerce_enum(Topology, self.topology, "topology")
        self.norm_kind = _coerce_enum(NormKind, self.norm_kind, "norm_kind")

    def validate(self) -> "BackboneConfig":
        """Check every field invariant; raises ConfigurationError naming the field"""
        if not self.stage_channels or any(c <= 0 for c in self.stage_channels):
            raise ConfigurationError("stage_channels", "must be a non-empty list of positive integers")
        if len(self.blocks_per_stage) != len(self.stage_channels) or any(b <= 0 for b in self.blocks_per_stage):
            raise ConfigurationError("blocks_per_stage", "needs one positive block count per stage")
        if self.final_channels <= 0:
            raise ConfigurationError("final_channels", "must be positive")
        if self.final_blocks <= 0:
            raise ConfigurationError("final_blocks", "must be positive")
        expected_stride = 2 ** (len(self.stage_channels) + 1)
        if self.total_stride != expected_stride:
            raise ConfigurationError(
                "total_stride",
                f"{self.total_stride} does not match {len(self.stage_channels)} stages plus stem (stride {expected_stride})")
        for name in ("input_height", "input_width"):
            value = getattr(self, name)
            if value <= 0 or value % self.total_stride != 0:
                raise ConfigurationError(name, f"{value} is not a positive multiple of total_stride {self.total_stride}")
        if self.norm_groups <= 0:
            raise ConfigurationError("norm_groups", "must be positive")
        for channels in list(self.stage_channels) + [self.final_channels]:
            if channels % self.norm_groups != 0:
                raise ConfigurationError("norm_groups", f"{self.norm_groups} does not divide channel count {channels}")
        if self.num_branches <= 0:
            raise ConfigurationError("num_branches", "must be positive")
        if self.topology != Topology.MULTI_BRANCH and self.num_branches != 1:
            raise ConfigurationError("num_branches", f"only MultiBranch accepts num_branches != 1 (topology={self.topology.value})")
        if self.topology == Topology.SPLIT_OUTPUT and not 0 < self.split_channels < self.final_channels:
            raise ConfigurationError("split_channels", f"must satisfy 0 < {self.split_channels} < final_channels {self.final_channels}")
        if len(self.input_mean) != 3 or len(self.input_std) != 3 or any(s <= 0 for s in self.input_std):
            raise ConfigurationError("input_std", "needs three means and three positive stds")
        return self

    @property
    def feature_height(self) -> int:
        return self.input_height // self.total_stride

    @property
    def feature_width(self) -> int:
        return self.input_width // self.total_stride

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["topology"] = self.topology.value
        data["norm_kind"] = self.norm_kind.value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BackboneConfig":
        return cls(**data)


@dataclass
class HeadConfig:
    tasks: List[str] = field(default_factory=lambda: list(TASKS))
    num_persons: Optional[int] = None
    attribute_schema: AttributeSchema = field(default_factory=AttributeSchema)
    num_joints: int = 16
    num_parts: int = 5
    temperature: float = 1.0
    head_channels: int = 32
    classifier_norm: Optional[NormKind] = None
    task_branches: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.attribute_schema, list):
            self.attribute_schema = AttributeSchema.from_list(self.attribute_schema)
        if self.classifier_norm is not None:
            self.classifier_norm = _coerce_enum(NormKind, self.classifier_norm, "classifier_norm")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tasks": list(self.tasks),
            "num_persons": self.num_persons,
            "attribute_schema": self.attribute_schema.to_list(),
            "num_joints": self.num_joints,
            "num_parts": self.num_parts,
            "temperature": self.temperature,
            "head_channels": self.head_channels,
            "classifier_norm": self.classifier_norm.value if self.classifier_norm else None,
            "task_branches": dict(self.task_branches),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "HeadConfig":
        return cls(**data)


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)

    def validate(self, require_data_sizes: bool = True) -> "ModelConfig":
        """require_data_sizes=False defers the checks the trainer fills in from the manifests"""
        self.backbone.validate()
        heads = self.heads
        unknown = sorted(set(heads.tasks) - set(TASKS))
        if unknown:
            raise ConfigurationError("tasks", f"unknown tasks {unknown}")
        if not heads.tasks:
            raise ConfigurationError("tasks", "at least one task head is required")
        if heads.num_persons is not None and heads.num_persons < 2:
            raise ConfigurationError("num_persons", "classification needs at least 2 persons")
        if require_data_sizes and "attributes" in heads.tasks and len(heads.attribute_schema) == 0:
            raise ConfigurationError("attribute_schema", "attribute task enabled without attributes")
        if heads.num_joints < 1:
            raise ConfigurationError("num_joints", "must be at least 1")
        if heads.num_parts < 2:
            raise ConfigurationError("num_parts", "segmentation needs at least 2 part classes")
        if heads.temperature <= 0:
            raise ConfigurationError("temperature", "must be positive")
        if heads.head_channels <= 0:
            raise ConfigurationError("head_channels", "must be positive")
        if self.backbone.topology == Topology.SPLIT_OUTPUT and "pose" in heads.tasks:
            if self.backbone.split_channels != heads.num_joints:
                raise ConfigurationError(
                    "split_channels", f"{self.backbone.split_channels} must equal num_joints {heads.num_joints}")
        for task, branch in heads.task_branches.items():
            if task not in TASKS:
                raise ConfigurationError("task_branches", f"unknown task '{task}'")
            if not 0 <= branch < self.backbone.num_branches:
                raise ConfigurationError("task_branches", f"branch {branch} for '{task}' out of range")
        return self

    def branch_index(self, task: str) -> int:
        """Branch a task reads in MultiBranch; tasks without an explicit entry are spread round-robin"""
        if task in self.heads.task_branches:
            return self.heads.task_branches[task]
        return TASKS.index(task) % self.backbone.num_branches

    def to_dict(self) -> Dict[str, Any]:
        return {"backbone": self.backbone.to_dict(), "heads": self.heads.to_dict()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        return cls(
            backbone=BackboneConfig.from_dict(data.get("backbone", {})),
            heads=HeadConfig.from_dict(data.get("heads", {})),
        )


# ---------------------------------------------------------------------------
# Training configuration
# ---------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class ScheduleConfig:
    # constant until decay_start_fraction of the steps, then exponential down to final_fraction of the base lr
    decay_kind: str = "exponential"
    decay_start_fraction: float = 2.0 / 3.0
    final_fraction: float = 0.01


@dataclass
class AugmentationConfig:
    enabled: bool = True
    hflip_prob: float = 0.5
    rotation_deg: float = 30.0
    translate_frac: float = 0.1
    scale_min: float = 0.75
    scale_max: float = 1.25


@dataclass
class DatasetEntry:
    manifest: str
    losses: List[str] = field(default_factory=list)
    pk_p: int = 8
    pk_k: int = 4
    batch_size: int = 32
    split: str = "train"
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig(**self.augmentation)

    @property
    def uses_pk(self) -> bool:
        return "triplet" in self.losses


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    datasets: List[DatasetEntry] = field(default_factory=list)
    loss_weights: Dict[str, float] = field(default_factory=lambda: {name: 1.0 for name in LOSS_NAMES})
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    triplet_margin_mode: MarginMode = MarginMode.SOFTPLUS
    triplet_margin: float = 0.2
    keep_fraction: float = 0.25
    total_steps: int = 3000
    seed: int = 0
    # keep this many ReID identities per dataset (all when None)
    limit_identities: Optional[int] = None
    checkpoint_every: int = 1000
    log_every: int = 50
    num_workers: int = 0
    init_checkpoint: Optional[str] = None
    init_scopes: List[str] = field(default_factory=lambda: ["all"])
    eval_manifest: Optional[str] = None
    eval_tasks: Optional[List[str]] = None
    eval_split: Optional[str] = None
    run_group: Optional[str] = None

    def __post_init__(self):
        self.triplet_margin_mode = _coerce_enum(MarginMode, self.triplet_margin_mode, "triplet_margin_mode")
        merged = {name: 1.0 for name in LOSS_NAMES}
        merged.update(self.loss_weights or {})
        self.loss_weights = merged

    def validate(self) -> "TrainConfig":
        """Checks that do not need the manifests; dataset task flags are checked by the trainer"""
        self.model.validate(require_data_sizes=False)
        if not self.datasets:
            raise ConfigurationError("datasets", "at least one dataset is required")
        for entry in self.datasets:
            unknown = sorted(set(entry.losses) - set(LOSS_NAMES))
            if unknown:
                raise ConfigurationError("losses", f"unknown losses {unknown} for {entry.manifest}")
            if not entry.losses:
                raise ConfigurationError("losses", f"dataset {entry.manifest} has no active loss")
            for loss_name in entry.losses:
                if LOSS_TASKS[loss_name] not in self.model.heads.tasks:
                    raise ConfigurationError("losses", f"loss '{loss_name}' needs the '{LOSS_TASKS[loss_name]}' head")
            if entry.uses_pk and (entry.pk_p < 2 or entry.pk_k < 2):
                raise ConfigurationError("pk_p", "batch-hard triplet batches need P >= 2 and K >= 2")
            if entry.batch_size <= 0:
                raise ConfigurationError("batch_size", "must be positive")
        for name, weight in self.loss_weights.items():
            if name not in LOSS_NAMES:
                raise ConfigurationError("loss_weights", f"unknown loss '{name}'")
            if weight <= 0:
                raise ConfigurationError("loss_weights", f"weight for '{name}' must be positive")
        if self.optimizer.kind.lower() != "adam":
            raise ConfigurationError("optimizer.kind", "only Adam is supported")
        if self.schedule.decay_kind not in ("exponential", "none"):
            raise ConfigurationError("schedule.decay_kind", "expected 'exponential' or 'none'")
        if not 0 < self.keep_fraction <= 1:
            raise ConfigurationError("keep_fraction", "must lie in (0, 1]")
        if self.total_steps < 0:
            raise ConfigurationError("total_steps", "must not be negative")
        if self.limit_identities is not None and self.limit_identities < 1:
            raise ConfigurationError("limit_identities", "must be at least 1")
        return self

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["model"] = self.model.to_dict()
        data["triplet_margin_mode"] = self.triplet_margin_mode.value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        data = dict(data)
        model = ModelConfig.from_dict(data.pop("model", {}))
        datasets = [DatasetEntry(**entry) for entry in data.pop("datasets", [])]
        optimizer = OptimizerConfig(**data.pop("optimizer", {}))
        schedule = ScheduleConfig(**data.pop("schedule", {}))
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError("config", f"unknown keys {unknown}")
        return cls(model=model, datasets=datasets, optimizer=optimizer, schedule=schedule, **data)


def load_train_config(path) -> TrainConfig:
    """Load a TrainConfig from JSON; relative manifest paths resolve against the config file"""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError("config", f"cannot read {path}: {e}")
    config = TrainConfig.from_dict(data)
    for entry in config.datasets:
        entry.manifest = str(_resolve_relative(entry.manifest, path.parent))
    if config.eval_manifest:
        config.eval_manifest = str(_resolve_relative(config.eval_manifest, path.parent))
    if config.init_checkpoint:
        config.init_checkpoint = str(_resolve_relative(config.init_checkpoint, path.parent))
    return config


def save_json(data: Dict[str, Any], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, ensure_ascii=False, sort_keys=True)
    return path


def save_train_config(config: TrainConfig, path) -> Path:
    return save_json(config.to_dict(), path)


def _resolve_relative(value: str, base: Path) -> Path:
    candidate = Path(value)
    return candidate if candidate.is_absolute() else (base / candidate).resolve()


def resolve_run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, DEFAULT_RUN_ROOT))


def parse_size(text: str) -> Tuple[int, int]:
    """Parse 'HxW' into (height, width)"""
    try:
        height, width = (int(part) for part in text.lower().split("x"))
    except ValueError:
        raise ConfigurationError("size", f"expected HEIGHTxWIDTH, got {text!r}")
    if height <= 0 or width <= 0:
        raise ConfigurationError("size", f"dimensions must be positive, got {text!r}")
    return height, width


def setup_logging(level: Optional[str] = None):
    """Configure root logging once for command-line use"""
    level_name = (level or os.environ.get(LOG_LEVEL_ENV, "INFO")).upper()
    logging.basicConfig(level=getattr(logging, level_name, logging.INFO),
                        format='%(asctime)s - %(levelname)s - %(message)s')
