"""Synthetic articulated-figure data, MPII-style annotation ingestion, splits.

The synthetic generator draws a 2D stick figure from a fixed forward-kinematic
skeleton. Bone lengths and joint angles come from per-sample seeded uniform
ranges, the figure is scaled and translated to fit the frame, and limbs are
rendered as anti-aliased bright segments (plus a head disc) over a dark noisy
background. Every sample is a pure function of (seed, index).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .keypoints import (
    NUM_JOINTS,
    JointId,
    PoseAnnotation,
    crop_affine,
    transform_pose_affine,
    warp_image,
)


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # [3, R, R] float32 in [0, 1]
    annotation: PoseAnnotation


@dataclass
class Dataset:
    samples: list
    resolution: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.samples:
            raise DatasetError("dataset must not be empty")

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


# --- synthetic generation -----------------------------------------------------------

# Parent -> child segments rendered as limbs. The upper_neck -> head_top
# segment is covered by the head disc (whose diameter is the head segment).
BONES = [
    (JointId.pelvis, JointId.thorax),
    (JointId.thorax, JointId.upper_neck),
    (JointId.upper_neck, JointId.head_top),
    (JointId.thorax, JointId.r_shoulder),
    (JointId.thorax, JointId.l_shoulder),
    (JointId.r_shoulder, JointId.r_elbow),
    (JointId.r_elbow, JointId.r_wrist),
    (JointId.l_shoulder, JointId.l_elbow),
    (JointId.l_elbow, JointId.l_wrist),
    (JointId.pelvis, JointId.r_hip),
    (JointId.pelvis, JointId.l_hip),
    (JointId.r_hip, JointId.r_knee),
    (JointId.r_knee, JointId.r_ankle),
    (JointId.l_hip, JointId.l_knee),
    (JointId.l_knee, JointId.l_ankle),
]

_LIMB_RADIUS_RANGE = (0.80, 0.88)  # px; bright pixels stay within 1 px of the bone
_BG_LOW, _BG_HIGH = 0.05, 0.25
_CLUTTER_TINT_MAX = 0.5  # distractors stay strictly below figure brightness
_CLUTTER_CLEARANCE = 2.0  # px kept clutter-free around the figure


def _sample_rng(seed, index):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def _skeleton(rng):
    """Joint positions in canonical units, y pointing down."""

    def polar(origin, length, angle):
        # angle measured from straight down (+y), positive toward +x
        return origin + length * np.array([math.sin(angle), math.cos(angle)])

    up = math.pi  # pointing -y

    pos = np.zeros((NUM_JOINTS, 2))
    pelvis = np.array([0.0, 0.0])
    torso_tilt = up + rng.uniform(-0.26, 0.26)
    thorax = polar(pelvis, rng.uniform(0.28, 0.36), torso_tilt)
    neck_tilt = torso_tilt + rng.uniform(-0.17, 0.17)
    neck = polar(thorax, rng.uniform(0.08, 0.12), neck_tilt)
    head = polar(neck, rng.uniform(0.12, 0.16), neck_tilt + rng.uniform(-0.1, 0.1))

    shoulder_dir = torso_tilt - math.pi / 2  # to the figure's right (+x-ish)
    sh_half = rng.uniform(0.10, 0.16)
    r_sho = polar(thorax, sh_half, shoulder_dir)
    l_sho = polar(thorax, sh_half, shoulder_dir + math.pi)

    def arm(shoulder, side):
        upper = rng.uniform(0.14, 0.20)
        fore = rng.uniform(0.12, 0.18)
        a1 = rng.uniform(-1.2, 1.2) * side
        elbow = polar(shoulder, upper, a1)
        a2 = a1 + rng.uniform(-1.6, 1.6)
        wrist = polar(elbow, fore, a2)
        return elbow, wrist

    r_elb, r_wri = arm(r_sho, 1.0)
    l_elb, l_wri = arm(l_sho, -1.0)

    hip_half = rng.uniform(0.06, 0.10)
    r_hip = polar(pelvis, hip_half, shoulder_dir)
    l_hip = polar(pelvis, hip_half, shoulder_dir + math.pi)

    def leg(hip, side):
        thigh = rng.uniform(0.18, 0.24)
        shin = rng.uniform(0.16, 0.22)
        a1 = rng.uniform(-0.5, 0.5) * side
        knee = polar(hip, thigh, a1)
        a2 = a1 + rng.uniform(-1.0, 1.0)
        ankle = polar(knee, shin, a2)
        return knee, ankle

    r_kne, r_ank = leg(r_hip, 1.0)
    l_kne, l_ank = leg(l_hip, -1.0)

    pos[JointId.pelvis] = pelvis
    pos[JointId.thorax] = thorax
    pos[JointId.upper_neck] = neck
    pos[JointId.head_top] = head
    pos[JointId.r_shoulder] = r_sho
    pos[JointId.l_shoulder] = l_sho
    pos[JointId.r_elbow] = r_elb
    pos[JointId.r_wrist] = r_wri
    pos[JointId.l_elbow] = l_elb
    pos[JointId.l_wrist] = l_wri
    pos[JointId.r_hip] = r_hip
    pos[JointId.l_hip] = l_hip
    pos[JointId.r_knee] = r_kne
    pos[JointId.r_ankle] = r_ank
    pos[JointId.l_knee] = l_kne
    pos[JointId.l_ankle] = l_ank
    return pos


def _segment_distance(px, py, a, b):
    """Distance from each grid point to segment a-b (all in pixel coords)."""
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-12:
        t = np.zeros_like(px)
    else:
        t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    cx = a[0] + t * ab[0]
    cy = a[1] + t * ab[1]
    return np.hypot(px - cx, py - cy)


def _render_figure(positions, head_center, head_radius, resolution, rng):
    ys, xs = np.mgrid[0:resolution, 0:resolution]
    xs = xs.astype(np.float64)
    ys = ys.astype(np.float64)
    limb_radius = rng.uniform(*_LIMB_RADIUS_RANGE)
    figure = np.zeros((resolution, resolution))
    bone_dist = np.full((resolution, resolution), np.inf)
    for parent, child in BONES:
        d = _segment_distance(xs, ys, positions[parent], positions[child])
        bone_dist = np.minimum(bone_dist, d)
        figure = np.maximum(figure, np.clip(limb_radius + 0.5 - d, 0.0, 1.0))
    head_dist = np.hypot(xs - head_center[0], ys - head_center[1]) - head_radius
    figure = np.maximum(figure, np.clip(0.5 - head_dist, 0.0, 1.0))
    near_figure = np.minimum(bone_dist - limb_radius, head_dist) < _CLUTTER_CLEARANCE

    background = rng.uniform(_BG_LOW, _BG_HIGH, size=(3, resolution, resolution))

    # Dim distractor segments and discs away from the figure; their tint is
    # capped so no clutter pixel can cross the figure-brightness threshold.
    clutter = np.zeros((resolution, resolution))
    for _ in range(int(rng.integers(3, 9))):
        if rng.uniform() < 0.5:
            a = rng.uniform(0, resolution, size=2)
            angle = rng.uniform(0, 2 * math.pi)
            length = rng.uniform(resolution / 10, resolution / 3)
            b = a + length * np.array([math.cos(angle), math.sin(angle)])
            d = _segment_distance(xs, ys, a, b)
            radius = rng.uniform(0.6, 1.2)
        else:
            center = rng.uniform(0, resolution, size=2)
            d = np.hypot(xs - center[0], ys - center[1])
            radius = rng.uniform(1.0, resolution / 10)
        clutter = np.maximum(clutter, np.clip(radius + 0.5 - d, 0.0, 1.0))
    clutter[near_figure] = 0.0
    clutter_tint = rng.uniform(0.25, _CLUTTER_TINT_MAX, size=3)

    # One channel carries the figure at full intensity so limb pixels are
    # unambiguously brighter than background or clutter.
    tint = rng.uniform(0.2, 0.9, size=3)
    tint[rng.integers(3)] = 1.0

    image = background * (1.0 - clutter[None]) + clutter_tint[:, None, None] * clutter[None]
    image = image * (1.0 - figure[None]) + tint[:, None, None] * figure[None]
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def generate_sample(seed, index, resolution):
    """Deterministic (seed, index) -> Sample."""
    rng = _sample_rng(seed, index)
    pos = _skeleton(rng)

    head_vec = pos[JointId.head_top] - pos[JointId.upper_neck]
    margin = max(2.0, resolution / 12.0)
    # Fit the figure (including the head disc extent) into the frame.
    lo = pos.min(axis=0) - np.linalg.norm(head_vec) / 2
    hi = pos.max(axis=0) + np.linalg.norm(head_vec) / 2
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-6))
    fit = (resolution - 2 * margin) / span
    center_target = (resolution - 1) / 2.0 + rng.uniform(-margin / 2, margin / 2, size=2)
    pos = (pos - (lo + hi) / 2.0) * fit + center_target

    head_len = float(np.linalg.norm(pos[JointId.head_top] - pos[JointId.upper_neck]))
    head_center = (pos[JointId.head_top] + pos[JointId.upper_neck]) / 2.0
    image = _render_figure(pos, head_center, head_len / 2.0, resolution, rng)

    annotation = PoseAnnotation(
        positions=pos,
        visible=np.ones(NUM_JOINTS, dtype=bool),
        head_len=head_len,
        image_id=f"syn-{seed}-{index:05d}",
    )
    return Sample(image=image, annotation=annotation)


def generate_synthetic(seed, count, resolution):
    if count <= 0:
        raise DatasetError(f"count must be positive, got {count}")
    if resolution < 16:
        raise DatasetError(f"resolution {resolution} too small to render a figure (min 16)")
    samples = [generate_sample(seed, i, resolution) for i in range(count)]
    return Dataset(
        samples=samples,
        resolution=resolution,
        provenance={"kind": "synthetic", "seed": int(seed), "count": int(count),
                    "resolution": int(resolution)},
    )


# --- MPII ingestion --------------------------------------------------------------

# The community JSON schema lists joints in MPII order, which coincides with
# the JointId codes 0..15 (r_ankle first, l_ankle last).
_MPII_REQUIRED = ("image", "center", "scale", "joints", "joints_vis", "head_rect")
_CROP_REFERENCE = 200.0  # MPII person scale is relative to a 200 px box
_HEAD_DIAG_FACTOR = 0.6  # head segment length = 0.6 * head rectangle diagonal


def load_mpii(annotation_file, image_dir, resolution=256):
    """Load person-centered crops from a community-schema annotation file.

    Each record must provide: image (file name), center [x, y], scale,
    joints (16 x [x, y]), joints_vis (16 flags), head_rect [x1, y1, x2, y2].
    The crop is the square window of side 200 * scale centered on ``center``,
    bilinearly resampled to ``resolution``.
    """
    from pathlib import Path

    from PIL import Image

    with open(annotation_file, "r", encoding="utf-8") as f:
        records = json.load(f)
    if not isinstance(records, list) or not records:
        raise DatasetError(f"{annotation_file}: expected a non-empty list of records")

    samples = []
    for i, rec in enumerate(records):
        for fieldname in _MPII_REQUIRED:
            if fieldname not in rec:
                raise DatasetError(f"record {i}: missing required field {fieldname!r}")
        joints = np.asarray(rec["joints"], dtype=np.float64)
        vis = np.asarray(rec["joints_vis"], dtype=bool)
        if joints.shape != (NUM_JOINTS, 2) or vis.shape != (NUM_JOINTS,):
            raise DatasetError(
                f"record {i}: joints must be 16x[x,y] with 16 visibility flags"
            )
        x1, y1, x2, y2 = (float(v) for v in rec["head_rect"])
        head_len = _HEAD_DIAG_FACTOR * math.hypot(x2 - x1, y2 - y1)
        if not head_len > 0:
            raise DatasetError(f"record {i}: degenerate head rectangle")

        path = Path(image_dir) / rec["image"]
        try:
            with Image.open(path) as im:
                rgb = im.convert("RGB")
                image = np.asarray(rgb, dtype=np.float32) / 255.0
        except (OSError, ValueError) as exc:
            raise DatasetError(f"unreadable image {path}: {exc}") from exc
        image = np.ascontiguousarray(image.transpose(2, 0, 1))

        cx, cy = (float(v) for v in rec["center"])
        side = _CROP_REFERENCE * float(rec["scale"])
        m = crop_affine(cx - side / 2.0, cy - side / 2.0, side, resolution)
        cropped = warp_image(image, m, resolution)

        pose = PoseAnnotation(positions=joints, visible=vis, head_len=head_len,
                              image_id=str(rec["image"]))
        pose = transform_pose_affine(pose, m, resolution,
                                     length_scale=resolution / side)
        samples.append(Sample(image=cropped, annotation=pose))

    return Dataset(
        samples=samples,
        resolution=resolution,
        provenance={"kind": "mpii", "annotation_file": str(annotation_file),
                    "resolution": int(resolution)},
    )


# --- train/validation split ---------------------------------------------------------


def split_train_val(dataset, val_count, seed):
    """Seeded shuffle; the last ``val_count`` shuffled samples become validation."""
    n = len(dataset)
    if not 0 < val_count < n:
        raise DatasetError(f"val_count must be in (0, {n}), got {val_count}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    order = rng.permutation(n)
    train_idx, val_idx = order[:-val_count], order[-val_count:]
    prov = dict(dataset.provenance)
    train = Dataset([dataset.samples[i] for i in train_idx], dataset.resolution,
                    {**prov, "split": "train", "split_seed": int(seed)})
    val = Dataset([dataset.samples[i] for i in val_idx], dataset.resolution,
                  {**prov, "split": "val", "split_seed": int(seed)})
    return train, val
