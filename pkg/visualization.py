#!/usr/bin/env python3
"""
Visualization
Prediction overlays (skeleton, part mask, attributes) and learning-curve plots
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import plotly.graph_objects as go
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

from batch_sampling import images_to_tensor
from mtl_config import EvaluationError, TaskError
from person_datasets import MPII_JOINT_NAMES, JointSet, resize_joints
from person_metrics import load_report
from trainer import model_from_checkpoint

logger = logging.getLogger(__name__)

OVERLAY_TASKS = ("attributes", "pose", "segmentation")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}

PART_COLORS = [(0, 0, 0), (230, 60, 60), (60, 200, 60), (60, 90, 230), (240, 200, 40),
               (200, 80, 200), (40, 200, 200), (250, 140, 40), (120, 120, 120), (160, 40, 40)]
GENDER_COLORS = {"female": (230, 40, 160), "male": (40, 120, 240)}
NEUTRAL_BOX = (200, 200, 200)

# MPII limbs as joint-index pairs
SKELETON = [(0, 1), (1, 2), (2, 6), (6, 3), (3, 4), (4, 5), (6, 7), (7, 8), (8, 9),
            (10, 11), (11, 12), (12, 7), (7, 13), (13, 14), (14, 15)]


def _predict(model, image: Image.Image, tasks: Sequence[str]):
    height, width = model.input_size
    resized = np.array(image.convert("RGB").resize((width, height), Image.BILINEAR), dtype=np.uint8)
    with torch.inference_mode():
        return model(images_to_tensor([resized]), tasks=list(tasks), with_classifier=False)


def render_overlay(model, image: Image.Image, tasks: Sequence[str], scale: int = 2) -> Image.Image:
    """Draw the predictions of `tasks` onto an upscaled copy of `image`"""
    outputs = _predict(model, image, tasks)
    base = image.convert("RGB")
    size = (base.height * scale, base.width * scale)
    canvas = base.resize((size[1], size[0]), Image.NEAREST)

    if "segmentation" in tasks:
        logits = F.interpolate(outputs["seg_logits"], size=size, mode="bilinear", align_corners=False)
        labels = logits.argmax(dim=1)[0].numpy()
        palette = np.array([PART_COLORS[i % len(PART_COLORS)] for i in range(int(labels.max()) + 1)], dtype=np.uint8)
        colored = Image.fromarray(palette[labels], mode="RGB")
        alpha = Image.fromarray(np.where(labels > 0, 110, 0).astype(np.uint8), mode="L")
        canvas.paste(colored, (0, 0), alpha)

    draw = ImageDraw.Draw(canvas)
    joints = None
    if "pose" in tasks:
        coords = outputs["joints"][0].numpy().astype(np.float64)
        joints = resize_joints(JointSet(coords, np.ones(len(coords), dtype=bool), 1.0), model.input_size, size)
        if len(coords) == len(MPII_JOINT_NAMES):
            for a, b in SKELETON:
                draw.line([tuple(joints.coords[a]), tuple(joints.coords[b])], fill=(255, 255, 0), width=2)
        for x, y in joints.coords:
            draw.ellipse([x - 3, y - 3, x + 3, y + 3], fill=(255, 0, 0), outline=(0, 0, 0))

    box_color = NEUTRAL_BOX
    if "attributes" in tasks:
        schema = model.config.heads.attribute_schema
        lines = []
        for spec in schema.attributes:
            index = int(outputs["attribute_logits"][spec.name].argmax(dim=1)[0])
            value = spec.class_names[index] if spec.class_names else str(index)
            lines.append(f"{spec.name}: {value}")
            if spec.name == "gender":
                box_color = GENDER_COLORS.get(value, NEUTRAL_BOX)
        draw.multiline_text((4, 4), "\n".join(lines), fill=(255, 255, 255), stroke_width=1, stroke_fill=(0, 0, 0))

    x0, y0, x1, y1 = 1, 1, size[1] - 2, size[0] - 2
    if joints is not None:
        margin = 6
        x0, y0 = np.maximum(joints.coords.min(axis=0) - margin, 1)
        x1, y1 = np.minimum(joints.coords.max(axis=0) + margin, [size[1] - 2, size[0] - 2])
    draw.rectangle([float(x0), float(y0), float(x1), float(y1)], outline=box_color, width=2)
    return canvas


def collect_images(images) -> List[Path]:
    paths = []
    for item in ([images] if isinstance(images, (str, Path)) else images):
        item = Path(item)
        if item.is_dir():
            paths += sorted(p for p in item.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        else:
            paths.append(item)
    return paths


def visualize(checkpoint, images, out_dir, tasks: Optional[Sequence[str]] = None, scale: int = 2) -> List[Path]:
    """
    One overlay PNG per input image. Requested tasks must have heads; without an explicit
    request every available overlay head is drawn and missing ones only produce a warning.
    """
    model, _ = model_from_checkpoint(checkpoint)
    model.eval()
    if tasks:
        missing = [t for t in tasks if t not in model.tasks]
        if missing:
            raise TaskError(f"checkpoint has no head for {missing} (heads: {model.tasks})")
        selected = [t for t in OVERLAY_TASKS if t in tasks]
    else:
        selected = [t for t in OVERLAY_TASKS if t in model.tasks]
        absent = [t for t in OVERLAY_TASKS if t not in model.tasks]
        if absent:
            logger.warning(f"Checkpoint has no {', '.join(absent)} head; overlays show {', '.join(selected) or 'nothing'}")
    if not selected:
        raise TaskError(f"checkpoint heads {model.tasks} have nothing to draw")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in collect_images(images):
        with Image.open(path) as img:
            overlay = render_overlay(model, img, selected, scale)
        target = out_dir / f"{path.stem}_overlay.png"
        overlay.save(target)
        written.append(target)
    logger.info(f"Wrote {len(written)} overlays to {out_dir}")
    return written


# ---------------------------------------------------------------------------
# Learning curves
# ---------------------------------------------------------------------------

def _run_point(run_dir: Path, metric: str, x_key: str) -> Tuple[str, float, float]:
    report_path = run_dir / "metrics.json"
    if not report_path.exists():
        raise EvaluationError(f"run {run_dir} has no metrics.json")
    report = load_report(report_path)
    value = report.metric(metric)
    if value is None:
        raise EvaluationError(f"run {run_dir} has no metric '{metric}'")
    group = report.meta.get("run_group")
    config_path = run_dir / "resolved_config.json"
    if not group and config_path.exists():
        with open(config_path, "r", encoding="utf-8") as f:
            group = json.load(f).get("run_group")
    x = report.meta.get(x_key)
    if x is None:
        raise EvaluationError(f"run {run_dir} has no '{x_key}' to plot against")
    return group or run_dir.name, float(x), float(value)


def learning_curve_points(runs: Sequence, metric: str, x_key: str = "train_identities") -> pd.DataFrame:
    """Mean metric per (run group, x); several seeds of one setting become one point"""
    rows = []
    for run in runs:
        group, x, value = _run_point(Path(run), metric, x_key)
        rows.append({"group": group, x_key: x, metric: value, "run": str(run)})
    frame = pd.DataFrame(rows)
    points = (frame.groupby(["group", x_key], as_index=False)
              .agg(**{metric: (metric, "mean"), "runs": ("run", "count")})
              .sort_values(["group", x_key]))
    return points.reset_index(drop=True)


def plot_learning_curves(runs: Sequence, metric: str, out_path, x_key: str = "train_identities") -> Dict[str, Path]:
    """SVG with one series per run group plus the plotted points as CSV next to it"""
    points = learning_curve_points(runs, metric, x_key)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out_path.with_suffix(".csv")
    points.to_csv(csv_path, index=False)

    fig = go.Figure()
    for group, series in points.groupby("group", sort=True):
        fig.add_trace(go.Scatter(x=series[x_key], y=series[metric], mode="lines+markers", name=str(group)))
    fig.update_layout(title=f"{metric} vs {x_key}", xaxis_title=x_key, yaxis_title=metric,
                      template="plotly_white", width=720, height=440)
    svg_path = out_path.with_suffix(".svg")
    fig.write_image(str(svg_path), format="svg")
    logger.info(f"Plotted {len(points)} points in {points['group'].nunique()} series to {svg_path}")
    return {"svg": svg_path, "csv": csv_path}
