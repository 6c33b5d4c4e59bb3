"""MPII joint taxonomy, subset splits, heatmap rendering/decoding, geometry.

Coordinates are (x, y) in pixels with x growing rightwards and y downwards;
image arrays are indexed [channel, y, x]. A positive rotation angle turns the
+x axis toward +y, i.e. a 90 degree rotation maps (cx + d, cy) to (cx, cy + d).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np


class JointId(enum.IntEnum):
    """The 16 MPII body joints with their standard integer codes."""

    r_ankle = 0
    r_knee = 1
    r_hip = 2
    pelvis = 3
    thorax = 4
    upper_neck = 5
    head_top = 6
    r_wrist = 7
    r_elbow = 8
    r_shoulder = 9
    l_shoulder = 10
    l_elbow = 11
    l_wrist = 12
    l_hip = 13
    l_knee = 14
    l_ankle = 15


NUM_JOINTS = 16

# Bilateral pairs merge into one reporting group; the torso groups Pelvis and
# Thorax are excluded from metric averages.
JOINT_GROUPS = {
    JointId.head_top: "Head",
    JointId.upper_neck: "Neck",
    JointId.r_shoulder: "Shoulder",
    JointId.l_shoulder: "Shoulder",
    JointId.r_elbow: "Elbow",
    JointId.l_elbow: "Elbow",
    JointId.r_wrist: "Wrist",
    JointId.l_wrist: "Wrist",
    JointId.pelvis: "Pelvis",
    JointId.thorax: "Thorax",
    JointId.r_hip: "Hip",
    JointId.l_hip: "Hip",
    JointId.r_knee: "Knee",
    JointId.l_knee: "Knee",
    JointId.r_ankle: "Ankle",
    JointId.l_ankle: "Ankle",
}

GROUP_ORDER = ["Head", "Neck", "Shoulder", "Elbow", "Wrist", "Hip", "Knee",
               "Ankle", "Pelvis", "Thorax"]

EXCLUDED_GROUPS = ("Pelvis", "Thorax")


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class JointSubsetSplit:
    """Two ordered joint subsets acting as the source/target domains."""

    name: str
    s1: tuple
    s2: tuple

    def __post_init__(self):
        for label, subset in (("s1", self.s1), ("s2", self.s2)):
            if len(set(subset)) != len(subset):
                raise SplitError(f"{label} of split {self.name!r} contains duplicates")
        if set(self.s1) == set(self.s2):
            raise SplitError(
                f"split {self.name!r}: subsets must differ in at least one joint"
            )

    def to_dict(self):
        return {
            "name": self.name,
            "s1": [j.name for j in self.s1],
            "s2": [j.name for j in self.s2],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            s1 = tuple(JointId[n] for n in d["s1"])
            s2 = tuple(JointId[n] for n in d["s2"])
            name = d["name"]
        except KeyError as exc:
            raise SplitError(f"split definition missing field or joint: {exc}") from exc
        return cls(name=name, s1=_ordered(s1), s2=_ordered(s2))


def _ordered(joints):
    """Subsets are kept in ascending joint-code order so heatmap channel order
    is stable across save/load."""
    return tuple(sorted(joints))


def _expand(*entries):
    out = []
    for entry in entries:
        if isinstance(entry, JointId):
            out.append(entry)
        else:  # bilateral base name
            out.append(JointId[f"r_{entry}"])
            out.append(JointId[f"l_{entry}"])
    return _ordered(out)


_BUILTIN_SPLITS = {
    # Central-body joints vs limb joints.
    "a": (
        _expand(JointId.head_top, JointId.upper_neck, "shoulder", JointId.pelvis,
                JointId.thorax, "hip"),
        _expand("knee", "ankle", "wrist", "elbow"),
    ),
    # Elbows join the source side.
    "b": (
        _expand(JointId.head_top, JointId.upper_neck, "shoulder", "elbow", "hip"),
        _expand("knee", "ankle", "wrist", JointId.pelvis, JointId.thorax),
    ),
    # Elbows and knees in the source; wrists/hips/ankles measured.
    "c": (
        _expand(JointId.head_top, JointId.upper_neck, "shoulder", "elbow", "knee"),
        _expand("wrist", "ankle", "hip", JointId.pelvis, JointId.thorax),
    ),
    # Distal limb joints feed head/neck/elbow/knee/torso (overlapping subsets).
    "d": (
        _expand("knee", "ankle", "wrist", "elbow"),
        _expand(JointId.head_top, JointId.upper_neck, "elbow", "knee",
                JointId.pelvis, JointId.thorax),
    ),
}


def builtin_split(tag):
    """The four standard 8/8 joint splits, keyed 'a' through 'd'."""
    if tag not in _BUILTIN_SPLITS:
        raise SplitError(f"unknown split tag {tag!r}; expected one of a, b, c, d")
    s1, s2 = _BUILTIN_SPLITS[tag]
    return JointSubsetSplit(name=tag, s1=s1, s2=s2)


def save_split(split, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(split.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_split(path):
    with open(path, "r", encoding="utf-8") as f:
        return JointSubsetSplit.from_dict(json.load(f))


# --- pose annotations ------------------------------------------------------------


@dataclass
class PoseAnnotation:
    """Joint positions in image pixels plus visibility and the head length."""

    positions: np.ndarray  # [16, 2] float64, (x, y)
    visible: np.ndarray  # [16] bool
    head_len: float
    image_id: str = ""

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(NUM_JOINTS, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(NUM_JOINTS)
        if not self.head_len > 0:
            raise ValueError(f"head_len must be positive, got {self.head_len}")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("pose annotation contains non-finite coordinates")

    def position_of(self, joint):
        return tuple(self.positions[int(joint)])

    def is_visible(self, joint):
        return bool(self.visible[int(joint)])

    def copy(self):
        return PoseAnnotation(self.positions.copy(), self.visible.copy(),
                              self.head_len, self.image_id)


# --- affine geometry ---------------------------------------------------------------


def center_affine(scale, rotation_degrees, input_resolution, output_resolution):
    """Forward map: rotate about the input center, scale, recenter on output.

    Returns a 2x3 matrix M with p_out = M[:, :2] @ p_in + M[:, 2].
    """
    theta = np.deg2rad(rotation_degrees)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s], [s, c]]) * scale
    c_in = (input_resolution - 1) / 2.0
    c_out = (output_resolution - 1) / 2.0
    t = np.array([c_out, c_out]) - rot @ np.array([c_in, c_in])
    return np.concatenate([rot, t[:, None]], axis=1)


def crop_affine(top_left_x, top_left_y, side, output_resolution):
    """Forward map for a square crop window resampled to the output size."""
    f = output_resolution / side
    return np.array([[f, 0.0, -top_left_x * f], [0.0, f, -top_left_y * f]])


def apply_affine(m, points):
    pts = np.asarray(points, dtype=np.float64)
    return pts @ m[:, :2].T + m[:, 2]


def invert_affine(m):
    inv = np.linalg.inv(m[:, :2])
    t = -inv @ m[:, 2]
    return np.concatenate([inv, t[:, None]], axis=1)


def warp_image(image, m, output_resolution):
    """Bilinearly resample a [C,H,W] float image under the forward map ``m``.

    Output pixels that map outside the source frame read as zero.
    """
    c, h, w = image.shape
    inv = invert_affine(m)
    ys, xs = np.mgrid[0:output_resolution, 0:output_resolution]
    src = apply_affine(inv, np.stack([xs.ravel(), ys.ravel()], axis=1))
    sx = src[:, 0].reshape(output_resolution, output_resolution)
    sy = src[:, 1].reshape(output_resolution, output_resolution)

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0).astype(image.dtype)
    fy = (sy - y0).astype(image.dtype)

    def sample(yi, xi):
        inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        vals = image[:, yc, xc]
        return np.where(inside[None], vals, 0)

    top = sample(y0, x0) * (1 - fx) + sample(y0, x0 + 1) * fx
    bot = sample(y0 + 1, x0) * (1 - fx) + sample(y0 + 1, x0 + 1) * fx
    out = top * (1 - fy) + bot * fy
    return np.ascontiguousarray(out.astype(image.dtype))


def transform_pose(pose, scale, rotation_degrees, output_resolution, input_resolution):
    """Map every joint through the center rotate/scale affine; joints leaving
    the output frame become invisible; head length scales with the figure."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    m = center_affine(scale, rotation_degrees, input_resolution, output_resolution)
    return transform_pose_affine(pose, m, output_resolution, length_scale=scale)


def transform_pose_affine(pose, m, output_resolution, length_scale):
    new_pos = apply_affine(m, pose.positions)
    in_frame = (
        (new_pos[:, 0] >= 0) & (new_pos[:, 0] < output_resolution)
        & (new_pos[:, 1] >= 0) & (new_pos[:, 1] < output_resolution)
    )
    return PoseAnnotation(
        positions=new_pos,
        visible=pose.visible & in_frame,
        head_len=pose.head_len * length_scale,
        image_id=pose.image_id,
    )


# --- heatmaps ------------------------------------------------------------------------


@dataclass
class Heatmap:
    """Per-joint confidence grids in a declared joint order."""

    maps: np.ndarray  # [num_joints, res, res]
    subset: tuple
    image_resolution: int

    @property
    def resolution(self):
        return self.maps.shape[-1]


ABSENT = (-1.0, -1.0)


def render_heatmaps(pose, subset, resolution, sigma, image_resolution):
    """Unnormalized Gaussian peaks at each joint, scaled into heatmap coords.

    Invisible or out-of-frame joints produce an all-zero map.
    """
    if resolution < 1 or sigma <= 0:
        raise ValueError(f"invalid resolution {resolution} or sigma {sigma}")
    factor = resolution / image_resolution
    maps = np.zeros((len(subset), resolution, resolution), dtype=np.float32)
    grid = np.arange(resolution, dtype=np.float64)
    for k, joint in enumerate(subset):
        x, y = pose.positions[int(joint)]
        if not pose.visible[int(joint)]:
            continue
        if not (0 <= x < image_resolution and 0 <= y < image_resolution):
            continue
        hx, hy = x * factor, y * factor
        d2 = (grid[None, :] - hx) ** 2 + (grid[:, None] - hy) ** 2
        maps[k] = np.exp(-d2 / (2.0 * sigma * sigma)).astype(np.float32)
    return Heatmap(maps=maps, subset=tuple(subset), image_resolution=image_resolution)


def decode_heatmaps(heatmap):
    """Argmax decode back to image coordinates.

    Ties resolve to the first cell in row-major order; an all-zero map decodes
    to the designated absent location with confidence 0.
    """
    res = heatmap.resolution
    factor = heatmap.image_resolution / res
    out = {}
    for k, joint in enumerate(heatmap.subset):
        grid = heatmap.maps[k]
        flat_idx = int(np.argmax(grid))
        conf = float(grid.reshape(-1)[flat_idx])
        if conf == 0.0:
            out[joint] = (ABSENT[0], ABSENT[1], 0.0)
            continue
        y, x = divmod(flat_idx, res)
        out[joint] = (x * factor, y * factor, conf)
    return out
