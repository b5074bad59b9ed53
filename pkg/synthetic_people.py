#!/usr/bin/env python3
"""
Synthetic People Generator
Renders articulated stick figures with exact joints, part masks, identities and attributes
"""

import logging
import math
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from PIL import Image, ImageDraw

from mtl_config import AttributeSchema, AttributeSpec, ConfigurationError
from person_datasets import (MERGED_PART_NAMES, MPII_FLIP_PAIRS, MPII_JOINT_NAMES, DatasetManifest, JointSet,
                             SampleRecord, save_manifest)

logger = logging.getLogger(__name__)

BACKGROUND, HEAD, UPPER_BODY, LOWER_BODY, SHOES = range(5)

COLOR_NAMES = ["red", "green", "blue", "yellow", "purple", "white"]
PALETTE = [(200, 40, 40), (40, 160, 60), (40, 70, 200), (220, 200, 40), (140, 50, 160), (235, 235, 235)]
SKIN_TONES = [(240, 200, 170), (200, 150, 110), (120, 80, 55)]
HAIR_COLORS = [(30, 25, 20), (110, 70, 30), (200, 170, 90)]
SHOE_COLOR = (25, 25, 25)
HAT_COLOR = (90, 60, 30)

# Part each joint is rendered inside (MPII joint order)
JOINT_PARTS = [SHOES, LOWER_BODY, LOWER_BODY, LOWER_BODY, LOWER_BODY, SHOES, LOWER_BODY, UPPER_BODY,
               HEAD, HEAD, UPPER_BODY, UPPER_BODY, UPPER_BODY, UPPER_BODY, UPPER_BODY, UPPER_BODY]

R_ANKLE, R_KNEE, R_HIP, L_HIP, L_KNEE, L_ANKLE, PELVIS, THORAX, UPPER_NECK, HEAD_TOP, \
    R_WRIST, R_ELBOW, R_SHOULDER, L_SHOULDER, L_ELBOW, L_WRIST = range(16)


def synthetic_attribute_schema() -> AttributeSchema:
    return AttributeSchema([
        AttributeSpec("upper_color", len(COLOR_NAMES), list(COLOR_NAMES), is_color=True),
        AttributeSpec("lower_color", len(COLOR_NAMES), list(COLOR_NAMES), is_color=True),
        AttributeSpec("sleeve_length", 2, ["long", "short"]),
        AttributeSpec("hat", 2, ["no", "yes"]),
    ])


@dataclass
class IdentityProfile:
    """Everything that stays fixed for one person; lengths are fractions of the figure height"""
    person_id: int
    upper_color: int
    lower_color: int
    short_sleeves: bool
    hat: bool
    skin: Tuple[int, int, int]
    hair: Tuple[int, int, int]
    head_radius: float
    torso: float
    shoulder_width: float
    hip_width: float
    upper_arm: float
    forearm: float
    thigh: float
    shin: float

    @property
    def attributes(self) -> Dict[str, int]:
        return {"upper_color": self.upper_color, "lower_color": self.lower_color,
                "sleeve_length": int(self.short_sleeves), "hat": int(self.hat)}


class SyntheticPeopleGenerator:
    """Deterministic stick-figure dataset: every random draw derives from (seed, identity, sample)"""

    def __init__(self, image_size: Tuple[int, int] = (128, 64), seed: int = 0):
        height, width = image_size
        if height < 32 or width < 16:
            raise ConfigurationError("size", f"synthetic images need at least 32x16 pixels, got {height}x{width}")
        self.image_size = (height, width)
        self.seed = seed
        self.figure_height = 0.8 * min(height, 2 * width)
        self.processing_log: List[Dict[str, Any]] = []

    def log_operation(self, operation: str, details: Dict[str, Any]):
        """Log generator operations"""
        self.processing_log.append({
            'timestamp': datetime.now().isoformat(),
            'operation': operation,
            'details': details
        })
        logger.info(f"{operation}: {details.get('summary', 'Operation completed')}")

    # -- identities ----------------------------------------------------------

    def identity_profiles(self, num_ids: int) -> List[IdentityProfile]:
        """Clothing combinations are drawn without replacement while enough combinations remain"""
        combos = [(u, l, s, h) for u in range(len(COLOR_NAMES)) for l in range(len(COLOR_NAMES))
                  for s in (0, 1) for h in (0, 1)]
        rng = np.random.default_rng([self.seed, 0])
        order = rng.permutation(len(combos)).tolist()
        while len(order) < num_ids:
            order += rng.permutation(len(combos)).tolist()

        profiles = []
        for offset in range(num_ids):
            person_id = offset + 1
            upper, lower, short, hat = combos[order[offset]]
            prng = np.random.default_rng([self.seed, person_id])
            skin = SKIN_TONES[int(prng.integers(len(SKIN_TONES)))]
            hair = HAIR_COLORS[int(prng.integers(len(HAIR_COLORS)))]
            torso, shoulders, hips, upper_arm, forearm, thigh, shin, head = (
                np.array([0.30, 0.105, 0.07, 0.165, 0.155, 0.22, 0.21, 0.065]) * prng.uniform(0.93, 1.07, size=8))
            profiles.append(IdentityProfile(
                person_id=person_id, upper_color=upper, lower_color=lower, short_sleeves=bool(short), hat=bool(hat),
                skin=skin, hair=hair, head_radius=float(head), torso=float(torso), shoulder_width=float(shoulders),
                hip_width=float(hips), upper_arm=float(upper_arm), forearm=float(forearm), thigh=float(thigh),
                shin=float(shin),
            ))
        return profiles

    # -- pose ----------------------------------------------------------------

    def sample_pose(self, profile: IdentityProfile, rng: np.random.Generator) -> np.ndarray:
        """(16, 2) joint coordinates in pixels for one random pose within the joint-angle limits"""
        height, width = self.image_size
        unit = self.figure_height
        max_reach = (profile.shoulder_width + profile.upper_arm * math.sin(math.radians(25))
                     + profile.forearm * math.sin(math.radians(40)) + 0.03) * unit
        slack_x = max(0.0, width / 2 - max_reach - 1)
        cx = width / 2 + rng.uniform(-slack_x, slack_x)
        slack_y = max(0.0, (height - unit) / 2 - 1)
        top = (height - unit) / 2 + rng.uniform(-slack_y, slack_y) * 0.5

        joints = np.zeros((16, 2))
        r = profile.head_radius * unit
        joints[HEAD_TOP] = (cx, top + 0.25 * r)
        joints[UPPER_NECK] = (cx, top + 1.75 * r)
        shoulder_y = top + 2 * r + 0.04 * unit
        joints[THORAX] = (cx, shoulder_y)
        pelvis_y = shoulder_y + profile.torso * unit
        joints[PELVIS] = (cx, pelvis_y)

        for side, (shoulder, elbow, wrist, hip, knee, ankle) in (
                (-1, (R_SHOULDER, R_ELBOW, R_WRIST, R_HIP, R_KNEE, R_ANKLE)),
                (1, (L_SHOULDER, L_ELBOW, L_WRIST, L_HIP, L_KNEE, L_ANKLE))):
            joints[shoulder] = (cx + side * profile.shoulder_width * unit, shoulder_y)
            arm = math.radians(rng.uniform(5, 25))
            bend = arm + math.radians(rng.uniform(0, 15))
            joints[elbow] = joints[shoulder] + profile.upper_arm * unit * np.array([side * math.sin(arm), math.cos(arm)])
            joints[wrist] = joints[elbow] + profile.forearm * unit * np.array([side * math.sin(bend), math.cos(bend)])

            joints[hip] = (cx + side * profile.hip_width * unit, pelvis_y)
            leg = math.radians(rng.uniform(0, 10))
            shin = leg + math.radians(rng.uniform(-5, 5))
            joints[knee] = joints[hip] + profile.thigh * unit * np.array([side * math.sin(leg), math.cos(leg)])
            joints[ankle] = joints[knee] + profile.shin * unit * np.array([side * math.sin(shin), math.cos(shin)])
        return joints

    # -- rendering -----------------------------------------------------------

    def render(self, profile: IdentityProfile, joints: np.ndarray,
               rng: np.random.Generator) -> Tuple[Image.Image, Image.Image]:
        """Paint image and part mask with the same primitives; later parts overwrite earlier ones"""
        height, width = self.image_size
        unit = self.figure_height
        background = tuple(int(v) for v in rng.integers(120, 200, size=3))
        image = Image.new("RGB", (width, height), background)
        mask = Image.new("L", (width, height), BACKGROUND)
        paint = ImageDraw.Draw(image)
        label = ImageDraw.Draw(mask)

        def limb(points, thickness, color, part):
            coords = [tuple(p) for p in points]
            for canvas, fill in ((paint, color), (label, part)):
                canvas.line(coords, fill=fill, width=max(1, int(round(thickness))))
                for x, y in coords:
                    half = thickness / 2
                    canvas.ellipse([x - half, y - half, x + half, y + half], fill=fill)

        def polygon(points, color, part):
            coords = [tuple(p) for p in points]
            paint.polygon(coords, fill=color)
            label.polygon(coords, fill=part)

        upper = PALETTE[profile.upper_color]
        lower = PALETTE[profile.lower_color]
        cx, pelvis_y = joints[PELVIS]
        shoulder_y = joints[THORAX][1]
        waist = pelvis_y - 0.04 * unit
        hip_half = profile.hip_width * unit + 0.035 * unit

        # lower body
        polygon([(cx - hip_half, waist), (cx + hip_half, waist),
                 (cx + hip_half, pelvis_y + 0.045 * unit), (cx - hip_half, pelvis_y + 0.045 * unit)], lower, LOWER_BODY)
        for hip, knee, ankle in ((R_HIP, R_KNEE, R_ANKLE), (L_HIP, L_KNEE, L_ANKLE)):
            limb([joints[hip], joints[knee], joints[ankle]], 0.07 * unit, lower, LOWER_BODY)

        # upper body
        shoulder_half = profile.shoulder_width * unit + 0.015 * unit
        polygon([(cx - shoulder_half, shoulder_y - 0.02 * unit), (cx + shoulder_half, shoulder_y - 0.02 * unit),
                 (cx + hip_half, waist - 1), (cx - hip_half, waist - 1)], upper, UPPER_BODY)
        forearm_color = profile.skin if profile.short_sleeves else upper
        for shoulder, elbow, wrist in ((R_SHOULDER, R_ELBOW, R_WRIST), (L_SHOULDER, L_ELBOW, L_WRIST)):
            limb([joints[shoulder], joints[elbow]], 0.05 * unit, upper, UPPER_BODY)
            limb([joints[elbow], joints[wrist]], 0.045 * unit, forearm_color, UPPER_BODY)

        # head
        r = profile.head_radius * unit
        hx, hy = joints[HEAD_TOP][0], joints[HEAD_TOP][1] - 0.25 * r + r
        for canvas, fill in ((paint, profile.skin), (label, HEAD)):
            canvas.ellipse([hx - r, hy - r, hx + r, hy + r], fill=fill)
        paint.chord([hx - r, hy - r, hx + r, hy + r], 180, 360, fill=profile.hair)
        if profile.hat:
            brim = [hx - 1.2 * r, hy - 0.55 * r, hx + 1.2 * r, hy - 0.3 * r]
            crown = [hx - 0.8 * r, hy - 1.35 * r, hx + 0.8 * r, hy - 0.5 * r]
            for box in (brim, crown):
                paint.rectangle(box, fill=HAT_COLOR)
                label.rectangle(box, fill=HEAD)

        # shoes last
        for ankle in (R_ANKLE, L_ANKLE):
            ax, ay = joints[ankle]
            box = [ax - 0.045 * unit, ay - 0.02 * unit, ax + 0.045 * unit, ay + 0.035 * unit]
            paint.ellipse(box, fill=SHOE_COLOR)
            label.ellipse(box, fill=SHOES)

        pixels = np.asarray(image, dtype=np.int16)
        noise = rng.integers(-6, 7, size=pixels.shape)
        image = Image.fromarray(np.clip(pixels + noise, 0, 255).astype(np.uint8), mode="RGB")
        return image, mask

    # -- dataset -------------------------------------------------------------

    def generate(self, out_dir, num_ids: int, samples_per_id: int, holdout_identities: int = 0) -> DatasetManifest:
        """
        Write images/, masks/ and manifest.json under out_dir.

        Training identities get ids 1..num_ids in the train split; holdout identities follow them
        with their first image as query and the rest as gallery. The camera id of an image is its
        index within its identity, so no two images of one person share a camera.
        """
        if num_ids < 2:
            raise ConfigurationError("identities", f"re-identification needs at least 2 identities, got {num_ids}")
        if samples_per_id < 1:
            raise ConfigurationError("images_per_id", "must be at least 1")
        if holdout_identities and samples_per_id < 2:
            raise ConfigurationError("images_per_id", "holdout identities need a query and at least one gallery image")
        out_dir = Path(out_dir)
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)

        records = []
        profiles = self.identity_profiles(num_ids + holdout_identities)
        for profile in profiles:
            holdout = profile.person_id > num_ids
            for sample in range(samples_per_id):
                rng = np.random.default_rng([self.seed, profile.person_id, sample + 1])
                joints = self.sample_pose(profile, rng)
                image, mask = self.render(profile, joints, rng)
                stem = f"{profile.person_id:04d}_{sample:03d}"
                image.save(out_dir / "images" / f"{stem}.png")
                mask.save(out_dir / "masks" / f"{stem}.png")
                split = "train" if not holdout else ("query" if sample == 0 else "gallery")
                records.append(SampleRecord(
                    image=f"images/{stem}.png", split=split, person_id=profile.person_id, camera_id=sample,
                    attributes=profile.attributes,
                    joints=JointSet(joints, np.ones(len(joints), dtype=bool),
                                    2 * profile.head_radius * self.figure_height),
                    mask=f"masks/{stem}.png"))

        manifest = DatasetManifest(
            name=out_dir.name or "synthetic", tasks=["reid", "attributes", "pose", "segmentation"], records=records,
            attribute_schema=synthetic_attribute_schema(), joint_names=list(MPII_JOINT_NAMES),
            joint_flip_pairs=list(MPII_FLIP_PAIRS), part_names=list(MERGED_PART_NAMES), part_flip_pairs=[],
            root=out_dir)
        save_manifest(manifest, out_dir / "manifest.json")
        self.log_operation('generate_synthetic', {
            'summary': f"Rendered {len(records)} images of {num_ids} training and {holdout_identities} holdout identities",
            'identities': num_ids,
            'holdout_identities': holdout_identities,
            'samples_per_id': samples_per_id,
            'image_size': list(self.image_size),
            'seed': self.seed,
        })
        return manifest


def generate_synthetic(out_dir, num_ids: int, samples_per_id: int, image_size: Tuple[int, int] = (128, 64),
                       seed: int = 0, holdout_identities: int = 0) -> Path:
    """Render a synthetic dataset and return the manifest path"""
    generator = SyntheticPeopleGenerator(image_size, seed)
    generator.generate(out_dir, num_ids, samples_per_id, holdout_identities)
    return Path(out_dir) / "manifest.json"


def joint_part_agreement(manifest: DatasetManifest, limit: Optional[int] = None) -> float:
    """Fraction of visible joints that fall inside the part region they belong to"""
    hits = total = 0
    for record in manifest.records[:limit]:
        with Image.open(manifest.resolve(record.mask)) as img:
            mask = np.array(img.convert("L"))
        for (x, y), visible, part in zip(record.joints.coords, record.joints.visible, JOINT_PARTS):
            if not visible:
                continue
            total += 1
            row, col = int(round(y)), int(round(x))
            if 0 <= row < mask.shape[0] and 0 <= col < mask.shape[1] and mask[row, col] == part:
                hits += 1
    return hits / total if total else 0.0
