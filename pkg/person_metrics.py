#!/usr/bin/env python3
"""
Person Metrics
Re-identification mAP/CMC, PCKh, segmentation confusion metrics and attribute accuracy
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from mtl_config import IGNORE_LABEL, JUNK_ID, MISSING_LABEL, AttributeSchema, EvaluationError, LabelError, \
    ShapeError, save_json

logger = logging.getLogger(__name__)

CMC_RANKS = (1, 5, 10)

# Joint groups of the usual per-part PCKh table, keyed by MPII joint names
PCKH_PART_GROUPS = {
    "head": ("head_top", "upper_neck"),
    "shoulder": ("r_shoulder", "l_shoulder"),
    "elbow": ("r_elbow", "l_elbow"),
    "wrist": ("r_wrist", "l_wrist"),
    "hip": ("r_hip", "l_hip"),
    "knee": ("r_knee", "l_knee"),
    "ankle": ("r_ankle", "l_ankle"),
}


# ---------------------------------------------------------------------------
# Re-identification
# ---------------------------------------------------------------------------

@dataclass
class RetrievalSet:
    query_embeddings: np.ndarray
    query_ids: np.ndarray
    query_cams: np.ndarray
    gallery_embeddings: np.ndarray
    gallery_ids: np.ndarray
    gallery_cams: np.ndarray

    def __post_init__(self):
        self.query_embeddings = np.asarray(self.query_embeddings, dtype=np.float64)
        self.gallery_embeddings = np.asarray(self.gallery_embeddings, dtype=np.float64)
        for name in ("query_ids", "query_cams", "gallery_ids", "gallery_cams"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64).reshape(-1))
        if len(self.query_ids) != len(self.query_embeddings) or len(self.query_cams) != len(self.query_embeddings):
            raise ShapeError("query embeddings, ids and cameras differ in length")
        if len(self.gallery_ids) != len(self.gallery_embeddings) or len(self.gallery_cams) != len(self.gallery_embeddings):
            raise ShapeError("gallery embeddings, ids and cameras differ in length")

    def distances(self) -> np.ndarray:
        return cdist(self.query_embeddings, self.gallery_embeddings, metric="euclidean")


def average_precision(relevant: np.ndarray) -> float:
    """Mean precision at the rank of every relevant item of a ranked boolean list"""
    ranks = np.flatnonzero(relevant) + 1
    if len(ranks) == 0:
        return 0.0
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def reid_eval(retrieval: RetrievalSet, ranks: Sequence[int] = CMC_RANKS,
              exclude_self: bool = False, distances: Optional[np.ndarray] = None) -> Dict[str, Any]:
    """
    Single-query protocol: gallery items sharing the query's person and camera, and junk items,
    are removed before ranking. Queries left without a match are excluded and counted.
    exclude_self additionally drops gallery item i for query i (query set == gallery set).
    """
    dist = retrieval.distances() if distances is None else np.asarray(distances, dtype=np.float64)
    hits = np.zeros(len(ranks))
    ap_values = []
    excluded = 0
    for q in range(len(retrieval.query_ids)):
        order = np.argsort(dist[q], kind="stable")
        ids = retrieval.gallery_ids[order]
        cams = retrieval.gallery_cams[order]
        keep = ~((ids == retrieval.query_ids[q]) & (cams == retrieval.query_cams[q])) & (ids != JUNK_ID)
        if exclude_self:
            keep &= order != q
        relevant = ids[keep] == retrieval.query_ids[q]
        if not relevant.any():
            excluded += 1
            continue
        ap_values.append(average_precision(relevant))
        first_hit = int(np.argmax(relevant)) + 1
        hits += np.array([first_hit <= k for k in ranks], dtype=np.float64)

    if not ap_values:
        raise EvaluationError(f"no query has a valid gallery match ({excluded} of {len(retrieval.query_ids)} excluded)")
    scored = len(ap_values)
    result: Dict[str, Any] = {"mAP": float(np.mean(ap_values))}
    for k, value in zip(ranks, hits / scored):
        result[f"cmc@{k}"] = float(value)
    result["num_queries"] = scored
    result["excluded_queries"] = excluded
    if excluded:
        logger.warning(f"{excluded} queries had no valid gallery match and were excluded")
    return result


# ---------------------------------------------------------------------------
# Pose
# ---------------------------------------------------------------------------

def _as_coords(joints) -> np.ndarray:
    if len(joints) and hasattr(joints[0], "coords"):
        return np.stack([j.coords for j in joints]).astype(np.float64)
    return np.asarray(joints, dtype=np.float64)


def pckh(predicted, ground_truth, alpha: float = 0.5, visible: Optional[np.ndarray] = None,
         head_sizes: Optional[np.ndarray] = None) -> Dict[str, Any]:
    """
    Fraction of visible joints within alpha * head_size of the ground truth.

    `ground_truth` is a sequence of JointSets (or an (N, J, 2) array together with `visible`
    and `head_sizes`). Joints never visible report None and are left out of the average,
    which pools all visible instances.
    """
    pred = _as_coords(predicted)
    if visible is None:
        visible = np.stack([j.visible for j in ground_truth])
        head_sizes = np.array([j.head_size for j in ground_truth], dtype=np.float64)
    gt = _as_coords(ground_truth)
    visible = np.asarray(visible, dtype=bool)
    head_sizes = np.asarray(head_sizes, dtype=np.float64)
    if pred.shape != gt.shape or visible.shape != gt.shape[:2] or head_sizes.shape != gt.shape[:1]:
        raise ShapeError(f"prediction {pred.shape}, ground truth {gt.shape}, visibility {visible.shape} "
                         f"and head sizes {head_sizes.shape} disagree")

    distance = np.linalg.norm(pred - gt, axis=-1)
    correct = (distance <= alpha * head_sizes[:, None]) & visible
    visible_counts = visible.sum(axis=0)
    correct_counts = correct.sum(axis=0)
    per_joint = [float(c / v) if v else None for c, v in zip(correct_counts, visible_counts)]
    total_visible = int(visible_counts.sum())
    return {
        "per_joint": per_joint,
        "avg": float(correct_counts.sum() / total_visible) if total_visible else None,
        "visible_counts": visible_counts.astype(int).tolist(),
        "correct_counts": correct_counts.astype(int).tolist(),
    }


def pckh_by_part(result: Mapping[str, Any], joint_names: Sequence[str]) -> Dict[str, Optional[float]]:
    """Left and right joints pooled into the head/shoulder/.../ankle columns"""
    index = {name: i for i, name in enumerate(joint_names)}
    grouped: Dict[str, Optional[float]] = {}
    for part, names in PCKH_PART_GROUPS.items():
        members = [index[n] for n in names if n in index]
        if not members:
            continue
        visible = sum(result["visible_counts"][i] for i in members)
        correct = sum(result["correct_counts"][i] for i in members)
        grouped[part] = correct / visible if visible else None
    return grouped


# ---------------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------------

class SegmentationConfusion:
    """Running confusion matrix (rows = ground truth, columns = prediction)"""

    def __init__(self, num_classes: int, ignore_index: int = IGNORE_LABEL):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, predicted: np.ndarray, ground_truth: np.ndarray):
        predicted = np.asarray(predicted)
        ground_truth = np.asarray(ground_truth)
        if predicted.shape != ground_truth.shape:
            raise ShapeError(f"prediction shape {predicted.shape} differs from ground truth {ground_truth.shape}")
        valid = ground_truth != self.ignore_index
        gt = ground_truth[valid].astype(np.int64)
        pred = predicted[valid].astype(np.int64)
        for name, labels in (("ground truth", gt), ("prediction", pred)):
            if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise LabelError(f"{name} labels outside [0, {self.num_classes})")
        self.matrix += np.bincount(gt * self.num_classes + pred,
                                   minlength=self.num_classes ** 2).reshape(self.num_classes, self.num_classes)

    def result(self, class_names: Optional[Sequence[str]] = None) -> Dict[str, Any]:
        matrix = self.matrix.astype(np.float64)
        true_positive = np.diag(matrix)
        gt_count = matrix.sum(axis=1)
        pred_count = matrix.sum(axis=0)
        total = matrix.sum()
        if total == 0:
            raise EvaluationError("no labelled pixels to evaluate")
        present = (gt_count + pred_count) > 0
        union = gt_count + pred_count - true_positive
        iou = [float(true_positive[c] / union[c]) if present[c] else None for c in range(self.num_classes)]
        accuracy = [float(true_positive[c] / gt_count[c]) for c in range(self.num_classes) if gt_count[c] > 0]
        result = {
            "overall_acc": float(true_positive.sum() / total),
            "mean_acc": float(np.mean(accuracy)),
            "mIoU": float(np.mean([v for v in iou if v is not None])),
            "per_class_iou": iou,
        }
        if class_names is not None:
            result["class_names"] = list(class_names)
        return result


def seg_eval(predicted, ground_truth, num_classes: int, ignore_index: int = IGNORE_LABEL,
             class_names: Optional[Sequence[str]] = None) -> Dict[str, Any]:
    """Overall/mean pixel accuracy and IoU; classes absent from both prediction and truth are left out"""
    confusion = SegmentationConfusion(num_classes, ignore_index)
    if isinstance(predicted, np.ndarray) and isinstance(ground_truth, np.ndarray):
        confusion.update(predicted, ground_truth)
    else:
        if len(predicted) != len(ground_truth):
            raise ShapeError(f"{len(predicted)} predicted masks for {len(ground_truth)} ground-truth masks")
        for pred_mask, gt_mask in zip(predicted, ground_truth):
            confusion.update(pred_mask, gt_mask)
    return confusion.result(class_names)


# ---------------------------------------------------------------------------
# Attributes
# ---------------------------------------------------------------------------

def attribute_eval(predicted: Mapping[str, np.ndarray], ground_truth: Mapping[str, np.ndarray],
                   schema: AttributeSchema, excluded: Optional[Sequence[str]] = None) -> Dict[str, Any]:
    """
    Per-attribute argmax accuracy over labelled samples and the unweighted mean.

    Predictions are class indices (N,) or scores (N, C). `avg_excluding` leaves out the
    attributes in `excluded` (default: the colour attributes) and is only reported when
    at least one of them is scored.
    """
    if excluded is None:
        excluded = [spec.name for spec in schema.attributes if spec.is_color]
    per_attribute: Dict[str, Optional[float]] = {}
    for spec in schema.attributes:
        if spec.name not in predicted or spec.name not in ground_truth:
            continue
        scores = np.asarray(predicted[spec.name])
        labels = np.asarray(ground_truth[spec.name]).reshape(-1)
        classes = scores.argmax(axis=1) if scores.ndim == 2 else scores.reshape(-1)
        if len(classes) != len(labels):
            raise ShapeError(f"attribute '{spec.name}': {len(classes)} predictions for {len(labels)} labels")
        labelled = labels != MISSING_LABEL
        per_attribute[spec.name] = float(np.mean(classes[labelled] == labels[labelled])) if labelled.any() else None

    scored = {name: value for name, value in per_attribute.items() if value is not None}
    if not scored:
        raise EvaluationError("no attribute labels to evaluate")
    result: Dict[str, Any] = {"per_attribute": per_attribute, "avg": float(np.mean(list(scored.values())))}
    kept = [value for name, value in scored.items() if name not in excluded]
    if len(kept) < len(scored) and kept:
        result["avg_excluding"] = float(np.mean(kept))
        result["excluded"] = sorted(set(excluded) & set(scored))
    return result


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    reid: Optional[Dict[str, Any]] = None
    pose: Optional[Dict[str, Any]] = None
    segmentation: Optional[Dict[str, Any]] = None
    attributes: Optional[Dict[str, Any]] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def sections(self) -> List[str]:
        return [name for name in ("reid", "pose", "segmentation", "attributes") if getattr(self, name) is not None]

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"meta": dict(self.meta)}
        for name in self.sections():
            data[name] = getattr(self, name)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MetricReport":
        return cls(reid=data.get("reid"), pose=data.get("pose"), segmentation=data.get("segmentation"),
                   attributes=data.get("attributes"), meta=dict(data.get("meta", {})))

    def flat_row(self) -> Dict[str, Any]:
        """One column per scalar metric, e.g. reid.mAP, pose.avg, segmentation.mIoU"""
        row: Dict[str, Any] = {}
        for key, value in self.meta.items():
            if isinstance(value, (int, float, str)) or value is None:
                row[key] = value
        if self.reid:
            for key, value in self.reid.items():
                row[f"reid.{key}"] = value
        if self.pose:
            row["pose.avg"] = self.pose.get("avg")
            names = self.pose.get("joint_names") or [str(i) for i in range(len(self.pose["per_joint"]))]
            for name, value in zip(names, self.pose["per_joint"]):
                row[f"pose.{name}"] = value
            for part, value in (self.pose.get("by_part") or {}).items():
                row[f"pose.part.{part}"] = value
        if self.segmentation:
            for key in ("overall_acc", "mean_acc", "mIoU"):
                row[f"segmentation.{key}"] = self.segmentation[key]
            names = self.segmentation.get("class_names") or [str(i) for i in range(len(self.segmentation["per_class_iou"]))]
            for name, value in zip(names, self.segmentation["per_class_iou"]):
                row[f"segmentation.iou.{name}"] = value
        if self.attributes:
            for name, value in self.attributes["per_attribute"].items():
                row[f"attributes.{name}"] = value
            row["attributes.avg"] = self.attributes["avg"]
            if "avg_excluding" in self.attributes:
                row["attributes.avg_excluding"] = self.attributes["avg_excluding"]
        return row

    def metric(self, name: str) -> Optional[float]:
        """Scalar lookup by flat column name"""
        return self.flat_row().get(name)

    def to_json(self, path) -> Path:
        return save_json(self.to_dict(), path)

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame([self.flat_row()]).to_csv(path, index=False)
        return path


def load_report(path: Union[str, Path]) -> MetricReport:
    with open(path, "r", encoding="utf-8") as f:
        return MetricReport.from_dict(json.load(f))
