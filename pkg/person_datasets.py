#!/usr/bin/env python3
"""
Person Datasets
Dataset manifests, sample loading, augmentation, part-class merging and layout converters
"""

import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image
from scipy import ndimage

from mtl_config import (DISTRACTOR_ID, IGNORE_LABEL, JUNK_ID, MISSING_LABEL, SPLITS, TASKS, AttributeSchema,
                        AugmentationConfig, BoundsError, ConversionError, ManifestError, MappingError,
                        market_attribute_schema, save_json)

logger = logging.getLogger(__name__)

MPII_JOINT_NAMES = [
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle", "pelvis", "thorax",
    "upper_neck", "head_top", "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
]
MPII_FLIP_PAIRS = [(0, 5), (1, 4), (2, 3), (10, 15), (11, 14), (12, 13)]

LIP_PART_NAMES = [
    "background", "hat", "hair", "glove", "sunglasses", "upper_clothes", "dress", "coat",
    "socks", "pants", "jumpsuits", "scarf", "skirt", "face", "left_arm", "right_arm",
    "left_leg", "right_leg", "left_shoe", "right_shoe",
]
LIP_FLIP_PAIRS = [(14, 15), (16, 17), (18, 19)]

MERGED_PART_NAMES = ["background", "head", "upper_body", "lower_body", "shoes"]

# Full-body garments (dress, jumpsuits) count as upper body
LIP_TO_MERGED_NAMES = {
    "background": "background",
    "hat": "head", "hair": "head", "sunglasses": "head", "face": "head", "scarf": "head",
    "upper_clothes": "upper_body", "coat": "upper_body", "dress": "upper_body", "jumpsuits": "upper_body",
    "glove": "upper_body", "left_arm": "upper_body", "right_arm": "upper_body",
    "pants": "lower_body", "skirt": "lower_body", "socks": "lower_body",
    "left_leg": "lower_body", "right_leg": "lower_body",
    "left_shoe": "shoes", "right_shoe": "shoes",
}
LIP_TO_MERGED = {LIP_PART_NAMES.index(src): MERGED_PART_NAMES.index(dst)
                 for src, dst in LIP_TO_MERGED_NAMES.items()}


# ---------------------------------------------------------------------------
# Records and manifests
# ---------------------------------------------------------------------------

@dataclass
class JointSet:
    """Joint coordinates (J, 2) as (x, y) image pixels, visibility (J,) and head size"""
    coords: np.ndarray
    visible: np.ndarray
    head_size: float

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)

    @property
    def num_joints(self) -> int:
        return len(self.coords)

    def to_triples(self) -> List[List[float]]:
        return [[round(float(x), 3), round(float(y), 3), int(v)] for (x, y), v in zip(self.coords, self.visible)]

    @classmethod
    def from_triples(cls, triples: Sequence[Sequence[float]], head_size: float) -> "JointSet":
        array = np.asarray(triples, dtype=np.float64).reshape(-1, 3)
        return cls(array[:, :2], array[:, 2] > 0, float(head_size))

    def copy(self) -> "JointSet":
        return JointSet(self.coords.copy(), self.visible.copy(), self.head_size)

    def check_bounds(self, width: int, height: int, margin: float = 0.0):
        x, y = self.coords[:, 0], self.coords[:, 1]
        outside = self.visible & ((x < -margin) | (x > width - 1 + margin) | (y < -margin) | (y > height - 1 + margin))
        if outside.any():
            raise BoundsError(f"visible joints {np.flatnonzero(outside).tolist()} lie outside the "
                              f"{width}x{height} image (margin {margin})")


@dataclass
class SampleRecord:
    image: str
    split: str = "train"
    person_id: Optional[int] = None
    camera_id: Optional[int] = None
    attributes: Optional[Dict[str, int]] = None
    joints: Optional[JointSet] = None
    mask: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"image": self.image, "split": self.split}
        if self.person_id is not None:
            data["person_id"] = int(self.person_id)
        if self.camera_id is not None:
            data["camera_id"] = int(self.camera_id)
        if self.attributes is not None:
            data["attributes"] = {k: int(v) for k, v in self.attributes.items()}
        if self.joints is not None:
            data["joints"] = self.joints.to_triples()
            data["head_size"] = round(float(self.joints.head_size), 3)
        if self.mask is not None:
            data["mask"] = self.mask
        return data


@dataclass
class DatasetManifest:
    name: str
    tasks: List[str]
    records: List[SampleRecord] = field(default_factory=list)
    attribute_schema: AttributeSchema = field(default_factory=AttributeSchema)
    joint_names: List[str] = field(default_factory=list)
    joint_flip_pairs: List[Tuple[int, int]] = field(default_factory=list)
    part_names: List[str] = field(default_factory=list)
    part_flip_pairs: List[Tuple[int, int]] = field(default_factory=list)
    root: Path = field(default_factory=Path)

    @property
    def size(self) -> int:
        return len(self.records)

    def has_task(self, task: str) -> bool:
        return task in self.tasks

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def num_parts(self) -> int:
        return len(self.part_names)

    def indices(self, split: Optional[str] = None) -> List[int]:
        return [i for i, r in enumerate(self.records) if split is None or r.split == split]

    def splits(self) -> List[str]:
        return sorted({r.split for r in self.records})

    def identities(self, split: Optional[str] = None) -> List[int]:
        """Real person identities (junk and distractor ids excluded)"""
        ids = {r.person_id for i, r in enumerate(self.records)
               if r.person_id is not None and (split is None or r.split == split)}
        return sorted(pid for pid in ids if pid not in (JUNK_ID, DISTRACTOR_ID))

    def identity_count(self, split: Optional[str] = None) -> int:
        return len(self.identities(split))

    def resolve(self, relative: str) -> Path:
        path = Path(relative)
        return path if path.is_absolute() else self.root / path

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "tasks": [t for t in TASKS if t in self.tasks],
            "attribute_schema": self.attribute_schema.to_list(),
            "joint_names": list(self.joint_names),
            "joint_flip_pairs": [list(p) for p in self.joint_flip_pairs],
            "part_names": list(self.part_names),
            "part_flip_pairs": [list(p) for p in self.part_flip_pairs],
            "records": [r.to_dict() for r in self.records],
        }


def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    save_json(manifest.to_dict(), path)
    logger.info(f"Wrote manifest '{manifest.name}' with {manifest.size} records to {path}")
    return path


def _parse_record(index: int, raw: Dict[str, Any], manifest: DatasetManifest) -> SampleRecord:
    def fail(field_name, message):
        raise ManifestError(message, record_index=index, field_name=field_name)

    if not isinstance(raw, dict):
        fail(None, "record must be a JSON object")
    if not isinstance(raw.get("image"), str) or not raw["image"]:
        fail("image", "missing image path")
    split = raw.get("split", "train")
    if split not in SPLITS:
        fail("split", f"unknown split {split!r} (expected one of {list(SPLITS)})")

    record = SampleRecord(image=raw["image"], split=split)

    reid = manifest.has_task("reid")
    if reid:
        if not isinstance(raw.get("person_id"), int):
            fail("person_id", "reid datasets need an integer person_id")
        record.person_id = raw["person_id"]
        if split in ("query", "gallery") and not isinstance(raw.get("camera_id"), int):
            fail("camera_id", "query/gallery records need an integer camera_id")
    elif "person_id" in raw:
        fail("person_id", "present but the manifest does not declare the reid task")
    if "camera_id" in raw:
        if not isinstance(raw["camera_id"], int):
            fail("camera_id", "must be an integer")
        record.camera_id = raw["camera_id"]

    if manifest.has_task("attributes"):
        labels = raw.get("attributes")
        if not isinstance(labels, dict):
            fail("attributes", "attribute datasets need an attributes object")
        unknown = sorted(set(labels) - set(manifest.attribute_schema.names))
        if unknown:
            fail("attributes", f"unknown attributes {unknown}")
        parsed = {}
        for spec in manifest.attribute_schema.attributes:
            value = labels.get(spec.name, MISSING_LABEL)
            if not isinstance(value, int) or not (value == MISSING_LABEL or 0 <= value < spec.num_classes):
                fail("attributes", f"label {value!r} invalid for '{spec.name}' ({spec.num_classes} classes)")
            parsed[spec.name] = value
        record.attributes = parsed
    elif "attributes" in raw:
        fail("attributes", "present but the manifest does not declare the attributes task")

    if manifest.has_task("pose"):
        triples = raw.get("joints")
        if not isinstance(triples, list) or len(triples) != manifest.num_joints:
            fail("joints", f"expected {manifest.num_joints} [x, y, visibility] triples")
        if any(not isinstance(t, list) or len(t) != 3 for t in triples):
            fail("joints", "every joint must be an [x, y, visibility] triple")
        head_size = raw.get("head_size")
        if not isinstance(head_size, (int, float)) or head_size <= 0:
            fail("head_size", "pose records need a positive head_size")
        record.joints = JointSet.from_triples(triples, head_size)
    elif "joints" in raw or "head_size" in raw:
        fail("joints", "present but the manifest does not declare the pose task")

    if manifest.has_task("segmentation"):
        if not isinstance(raw.get("mask"), str) or not raw["mask"]:
            fail("mask", "segmentation records need a mask path")
        record.mask = raw["mask"]
    elif "mask" in raw:
        fail("mask", "present but the manifest does not declare the segmentation task")
    return record


def manifest_from_dict(data: Dict[str, Any], root: Path) -> DatasetManifest:
    tasks = data.get("tasks")
    if not isinstance(tasks, list) or not tasks:
        raise ManifestError("manifest needs a non-empty task list", field_name="tasks")
    unknown = sorted(set(tasks) - set(TASKS))
    if unknown:
        raise ManifestError(f"unknown tasks {unknown}", field_name="tasks")
    try:
        schema = AttributeSchema.from_list(data.get("attribute_schema"))
    except (ValueError, TypeError) as e:
        raise ManifestError(str(e), field_name="attribute_schema")
    manifest = DatasetManifest(
        name=str(data.get("name", root.name)),
        tasks=list(tasks),
        attribute_schema=schema,
        joint_names=list(data.get("joint_names", [])),
        joint_flip_pairs=[tuple(p) for p in data.get("joint_flip_pairs", [])],
        part_names=list(data.get("part_names", [])),
        part_flip_pairs=[tuple(p) for p in data.get("part_flip_pairs", [])],
        root=root,
    )
    if manifest.has_task("attributes") and len(schema) == 0:
        raise ManifestError("attribute task declared without an attribute schema", field_name="attribute_schema")
    if manifest.has_task("pose") and manifest.num_joints == 0:
        raise ManifestError("pose task declared without joint names", field_name="joint_names")
    if manifest.has_task("segmentation") and manifest.num_parts < 2:
        raise ManifestError("segmentation task declared without part names", field_name="part_names")
    raw_records = data.get("records")
    if not isinstance(raw_records, list):
        raise ManifestError("manifest needs a records list", field_name="records")
    manifest.records = [_parse_record(i, raw, manifest) for i, raw in enumerate(raw_records)]
    return manifest


def load_manifest(path, spot_check: int = 8) -> DatasetManifest:
    """Parse and validate a manifest JSON file; a few evenly spaced records are checked on disk"""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"cannot read manifest {path}: {e}")
    manifest = manifest_from_dict(data, path.parent)

    if spot_check and manifest.size:
        for index in np.unique(np.linspace(0, manifest.size - 1, min(spot_check, manifest.size)).astype(int)):
            record = manifest.records[int(index)]
            if not manifest.resolve(record.image).exists():
                raise ManifestError(f"image file {record.image} not found", record_index=int(index), field_name="image")
            if record.mask is not None and not manifest.resolve(record.mask).exists():
                raise ManifestError(f"mask file {record.mask} not found", record_index=int(index), field_name="mask")
    logger.info(f"Loaded manifest '{manifest.name}': {manifest.size} records, tasks {manifest.tasks}, "
                f"{manifest.identity_count()} identities")
    return manifest


def limit_identities(manifest: DatasetManifest, n: int, seed: int = 0) -> DatasetManifest:
    """Keep the records of n training identities drawn under `seed`; evaluation splits stay intact"""
    available = manifest.identities("train")
    if not 0 < n <= len(available):
        raise BoundsError(f"cannot keep {n} identities, manifest has {len(available)} training identities")
    if n == len(available):
        return manifest
    chosen = set(np.random.default_rng(seed).choice(available, size=n, replace=False).tolist())
    records = [r for r in manifest.records
               if r.split != "train" or r.person_id is None or r.person_id in chosen]
    logger.info(f"Limited '{manifest.name}' to {n} of {len(available)} training identities")
    return replace(manifest, records=records)


def merge_classes(mask: np.ndarray, mapping: Mapping[int, int], ignore_index: int = IGNORE_LABEL) -> np.ndarray:
    """Pixelwise relabel; the ignore label maps to itself"""
    mask = np.asarray(mask)
    present = set(np.unique(mask).tolist()) - {ignore_index}
    unmapped = sorted(present - set(mapping))
    if unmapped:
        raise MappingError(f"labels {unmapped} have no entry in the class mapping")
    lut = np.arange(max(256, int(mask.max()) + 1 if mask.size else 256), dtype=np.int64)
    for src, dst in mapping.items():
        lut[src] = dst
    return lut[mask].astype(mask.dtype)


# ---------------------------------------------------------------------------
# Sample loading and augmentation
# ---------------------------------------------------------------------------

@dataclass
class SampleContents:
    image: np.ndarray                    # (H, W, 3) uint8
    joints: Optional[JointSet] = None
    mask: Optional[np.ndarray] = None    # (H, W) integer part labels

    @property
    def size(self) -> Tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


def read_mask(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.array(img.convert("L"), dtype=np.uint8)


def write_mask(mask: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(path)
    return path


def resize_joints(joints: JointSet, src_size: Tuple[int, int], dst_size: Tuple[int, int]) -> JointSet:
    """Rescale pixel-index coordinates between image sizes (pixel centres stay aligned)"""
    (src_h, src_w), (dst_h, dst_w) = src_size, dst_size
    sx, sy = dst_w / src_w, dst_h / src_h
    coords = joints.coords.copy()
    coords[:, 0] = (coords[:, 0] + 0.5) * sx - 0.5
    coords[:, 1] = (coords[:, 1] + 0.5) * sy - 0.5
    return JointSet(coords, joints.visible.copy(), joints.head_size * math.sqrt(sx * sy))


def load_sample(manifest: DatasetManifest, index: int, size: Optional[Tuple[int, int]] = None,
                joint_margin: float = 8.0) -> SampleContents:
    """Read one record's image (+ joints and mask) resized to `size` = (H, W)"""
    record = manifest.records[index]
    with Image.open(manifest.resolve(record.image)) as img:
        image = img.convert("RGB")
        original = (image.height, image.width)
        if size is not None and original != tuple(size):
            image = image.resize((size[1], size[0]), Image.BILINEAR)
        pixels = np.array(image, dtype=np.uint8)
    target = pixels.shape[:2]

    joints = None
    if record.joints is not None:
        try:
            record.joints.check_bounds(original[1], original[0], joint_margin)
        except BoundsError as e:
            raise ManifestError(str(e), record_index=index, field_name="joints")
        joints = resize_joints(record.joints, original, target) if original != target else record.joints.copy()

    mask = None
    if record.mask is not None:
        with Image.open(manifest.resolve(record.mask)) as img:
            mask_img = img.convert("L")
            if (mask_img.height, mask_img.width) != target:
                mask_img = mask_img.resize((target[1], target[0]), Image.NEAREST)
            mask = np.array(mask_img, dtype=np.uint8)
    return SampleContents(pixels, joints, mask)


def _flip_lookup(num_labels: int, pairs: Sequence[Tuple[int, int]]) -> np.ndarray:
    lut = np.arange(max(num_labels, 256), dtype=np.int64)
    for a, b in pairs:
        lut[a], lut[b] = b, a
    return lut


def hflip(contents: SampleContents, joint_flip_pairs: Sequence[Tuple[int, int]] = (),
          part_flip_pairs: Sequence[Tuple[int, int]] = ()) -> SampleContents:
    """Mirror image and mask, reflect joint x, swap left/right joints and part labels"""
    width = contents.image.shape[1]
    image = np.ascontiguousarray(contents.image[:, ::-1])
    joints = None
    if contents.joints is not None:
        coords = contents.joints.coords.copy()
        visible = contents.joints.visible.copy()
        coords[:, 0] = (width - 1) - coords[:, 0]
        for a, b in joint_flip_pairs:
            coords[[a, b]] = coords[[b, a]]
            visible[[a, b]] = visible[[b, a]]
        joints = JointSet(coords, visible, contents.joints.head_size)
    mask = None
    if contents.mask is not None:
        mask = np.ascontiguousarray(contents.mask[:, ::-1])
        if part_flip_pairs:
            mask = _flip_lookup(int(mask.max()) + 1, part_flip_pairs)[mask].astype(contents.mask.dtype)
    return SampleContents(image, joints, mask)


def similarity_matrix(rotation_deg: float, scale: float, translation: Tuple[float, float],
                      size: Tuple[int, int]) -> np.ndarray:
    """Forward 2x3 transform in (x, y) pixel-index coordinates about the image centre"""
    height, width = size
    centre = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    theta = math.radians(rotation_deg)
    linear = scale * np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    offset = centre + np.asarray(translation, dtype=np.float64) - linear @ centre
    return np.hstack([linear, offset[:, None]])


def warp_affine(contents: SampleContents, matrix: np.ndarray) -> SampleContents:
    """Apply one similarity transform to image, joints and mask; joints leaving the image become invisible"""
    height, width = contents.image.shape[:2]
    linear, offset = matrix[:, :2], matrix[:, 2]
    inverse = np.linalg.inv(linear)
    # scipy works in (row, col) = (y, x) order and maps output -> input coordinates
    swap = np.array([[0, 1], [1, 0]])
    inverse_rc = swap @ inverse @ swap
    offset_rc = swap @ (-inverse @ offset)

    channels = [ndimage.affine_transform(contents.image[..., c].astype(np.float32), inverse_rc, offset=offset_rc,
                                         output_shape=(height, width), order=1, mode="constant", cval=0.0)
                for c in range(contents.image.shape[2])]
    image = np.clip(np.rint(np.stack(channels, axis=-1)), 0, 255).astype(np.uint8)

    joints = None
    if contents.joints is not None:
        coords = contents.joints.coords @ linear.T + offset
        inside = (coords[:, 0] >= 0) & (coords[:, 0] <= width - 1) & (coords[:, 1] >= 0) & (coords[:, 1] <= height - 1)
        scale = math.sqrt(abs(np.linalg.det(linear)))
        joints = JointSet(coords, contents.joints.visible & inside, contents.joints.head_size * scale)

    mask = None
    if contents.mask is not None:
        mask = ndimage.affine_transform(contents.mask, inverse_rc, offset=offset_rc, output_shape=(height, width),
                                        order=0, mode="constant", cval=IGNORE_LABEL).astype(contents.mask.dtype)
    return SampleContents(image, joints, mask)


def augment(contents: SampleContents, config: AugmentationConfig, seed: Union[int, np.random.Generator],
            joint_flip_pairs: Sequence[Tuple[int, int]] = (), part_flip_pairs: Sequence[Tuple[int, int]] = (),
            allow_affine: bool = True) -> SampleContents:
    """Random horizontal flip, then (pose/segmentation data only) one random similarity transform"""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if not config.enabled:
        return contents
    if config.hflip_prob > 0 and rng.random() < config.hflip_prob:
        contents = hflip(contents, joint_flip_pairs, part_flip_pairs)
    if allow_affine:
        rotation = rng.uniform(-config.rotation_deg, config.rotation_deg) if config.rotation_deg else 0.0
        scale = rng.uniform(config.scale_min, config.scale_max) if config.scale_max > config.scale_min else config.scale_min
        height, width = contents.size
        shift = rng.uniform(-config.translate_frac, config.translate_frac, size=2) if config.translate_frac else np.zeros(2)
        translation = (shift[0] * width, shift[1] * height)
        if rotation != 0.0 or scale != 1.0 or translation != (0.0, 0.0):
            contents = warp_affine(contents, similarity_matrix(rotation, scale, translation, (height, width)))
    return contents


# ---------------------------------------------------------------------------
# Layout converters (best effort)
# ---------------------------------------------------------------------------

MARKET_NAME = re.compile(r"^(-?\d+)_c(\d+)")


def _require(paths: Dict[str, Path], layout: str):
    missing = [f"{label} ({path})" for label, path in paths.items() if not path.exists()]
    if missing:
        raise ConversionError(layout, missing)


def convert_market(root, out_path, attribute_csv=None) -> Path:
    """
    Market-1501 layout: bounding_box_train/, query/, bounding_box_test/ with PPPP_cC... names.
    An optional CSV (person_id + one column per attribute) adds the attribute task.
    """
    root = Path(root)
    folders = {"bounding_box_train": root / "bounding_box_train", "query": root / "query",
               "bounding_box_test": root / "bounding_box_test"}
    _require(folders, "market")
    schema = market_attribute_schema(include_colors=False)
    attribute_table = None
    if attribute_csv is not None:
        _require({"attribute csv": Path(attribute_csv)}, "market")
        frame = pd.read_csv(attribute_csv)
        if "person_id" not in frame.columns:
            raise ConversionError("market", ["person_id column in attribute csv"])
        columns = [name for name in schema.names if name in frame.columns]
        schema = AttributeSchema([schema.get(name) for name in columns])
        attribute_table = frame.set_index("person_id")[columns]

    records = []
    for folder, split in (("bounding_box_train", "train"), ("query", "query"), ("bounding_box_test", "gallery")):
        for image_path in sorted(folders[folder].glob("*.jpg")):
            match = MARKET_NAME.match(image_path.name)
            if not match:
                continue
            person_id, camera_id = int(match.group(1)), int(match.group(2))
            record = SampleRecord(image=str(image_path.relative_to(root)), split=split,
                                  person_id=person_id, camera_id=camera_id)
            if attribute_table is not None:
                if person_id in attribute_table.index:
                    row = attribute_table.loc[person_id]
                    record.attributes = {name: int(row[name]) for name in schema.names}
                else:
                    record.attributes = {name: MISSING_LABEL for name in schema.names}
            records.append(record)
    tasks = ["reid"] + (["attributes"] if attribute_table is not None else [])
    manifest = DatasetManifest(name="market1501", tasks=tasks, records=records,
                               attribute_schema=schema if attribute_table is not None else AttributeSchema(),
                               root=root)
    return _save_converted(manifest, out_path, root)


def convert_mpii(root, out_path) -> Path:
    """Pre-cropped MPII persons listed in annotations.json: [{image, joints, head_size, split}]"""
    root = Path(root)
    annotations = root / "annotations.json"
    _require({"annotations.json": annotations, "images/": root / "images"}, "mpii")
    with open(annotations, "r", encoding="utf-8") as f:
        entries = json.load(f)
    records = []
    for entry in entries:
        records.append(SampleRecord(
            image=str(Path("images") / entry["image"]), split=entry.get("split", "train"),
            joints=JointSet.from_triples(entry["joints"], entry["head_size"])))
    manifest = DatasetManifest(name="mpii", tasks=["pose"], records=records, joint_names=list(MPII_JOINT_NAMES),
                               joint_flip_pairs=list(MPII_FLIP_PAIRS), root=root)
    return _save_converted(manifest, out_path, root)


def convert_lip(root, out_path, merge_parts: bool = False) -> Path:
    """LIP single-person layout; merge_parts rewrites masks to the five merged classes next to out_path"""
    root = Path(root)
    pieces = {
        "train images": root / "TrainVal_images" / "train_images",
        "val images": root / "TrainVal_images" / "val_images",
        "train segmentations": root / "TrainVal_parsing_annotations" / "train_segmentations",
        "val segmentations": root / "TrainVal_parsing_annotations" / "val_segmentations",
    }
    _require(pieces, "lip")
    out_path = Path(out_path)
    records = []
    for split, image_dir, mask_dir in (("train", pieces["train images"], pieces["train segmentations"]),
                                       ("val", pieces["val images"], pieces["val segmentations"])):
        for image_path in sorted(image_dir.glob("*.jpg")):
            mask_path = mask_dir / f"{image_path.stem}.png"
            if not mask_path.exists():
                logger.warning(f"Skipping {image_path.name}: no segmentation mask")
                continue
            if merge_parts:
                merged_path = out_path.parent / "merged_masks" / split / mask_path.name
                write_mask(merge_classes(read_mask(mask_path), LIP_TO_MERGED), merged_path)
                mask_path = merged_path
            records.append(SampleRecord(image=str(image_path.resolve()), split=split, mask=str(mask_path.resolve())))
    part_names = MERGED_PART_NAMES if merge_parts else LIP_PART_NAMES
    manifest = DatasetManifest(name="lip5" if merge_parts else "lip", tasks=["segmentation"], records=records,
                               part_names=list(part_names), part_flip_pairs=[] if merge_parts else list(LIP_FLIP_PAIRS),
                               root=root)
    return _save_converted(manifest, out_path, root)


def _save_converted(manifest: DatasetManifest, out_path, root: Path) -> Path:
    out_path = Path(out_path)
    # keep image paths valid relative to the written manifest
    for record in manifest.records:
        record.image = str(manifest.resolve(record.image).resolve())
        if record.mask is not None:
            record.mask = str(manifest.resolve(record.mask).resolve())
    manifest.root = out_path.parent
    logger.info(f"Converted {root} into {manifest.size} records ({manifest.identity_count()} identities)")
    return save_manifest(manifest, out_path)
