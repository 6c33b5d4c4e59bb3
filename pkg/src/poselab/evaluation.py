"""PCKh/PCK scoring and model evaluation.

A joint counts as correct when its prediction error is strictly less than
threshold * normalizer ("less than half the head segment" for PCKh@0.5).
Invisible ground-truth joints are excluded from both numerator and
denominator. Bilateral joints pool into one group (e.g. Wrist) over all
included instances of both sides, and the reported average is the mean of the
group scores excluding the Pelvis and Thorax torso groups.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .keypoints import (
    EXCLUDED_GROUPS,
    GROUP_ORDER,
    JOINT_GROUPS,
    Heatmap,
    decode_heatmaps,
)


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricSpec:
    kind: str = "pckh"  # "pckh" | "pck"
    threshold: float = 0.5
    normalization: str = "head"  # "head" | "bbox" | "heatmap_tenth"

    def label(self):
        if self.kind == "pckh":
            return f"PCKh@{self.threshold:g}"
        return f"PCK@{self.threshold:g}({self.normalization})"

    @classmethod
    def parse(cls, text):
        """Parse 'pckh@0.5' or 'pck@0.5:heatmap_tenth' style metric strings."""
        body = text.strip().lower()
        norm = "head"
        if ":" in body:
            body, norm = body.split(":", 1)
        kind, _, thr = body.partition("@")
        if kind not in ("pckh", "pck"):
            raise MetricError(f"unknown metric kind {kind!r}")
        if norm not in ("head", "bbox", "heatmap_tenth"):
            raise MetricError(f"unknown normalization {norm!r}")
        threshold = float(thr) if thr else 0.5
        if kind == "pckh":
            norm = "head"
        return cls(kind=kind, threshold=threshold, normalization=norm)


@dataclass
class MetricReport:
    metric: str
    subset: tuple
    sample_count: int
    joint_correct: dict = field(default_factory=dict)  # JointId -> int
    joint_total: dict = field(default_factory=dict)  # JointId -> int
    group_scores: dict = field(default_factory=dict)  # group -> float | None
    average: float = None

    def joint_score(self, joint):
        total = self.joint_total.get(joint, 0)
        if total == 0:
            return None
        return 100.0 * self.joint_correct[joint] / total

    def included_groups(self):
        return [g for g in GROUP_ORDER
                if g in self.group_scores and g not in EXCLUDED_GROUPS
                and self.group_scores[g] is not None]


def _normalizer(spec, annotation, image_resolution):
    if spec.normalization == "head":
        if not annotation.head_len > 0:
            raise MetricError(
                f"sample {annotation.image_id!r} has no positive head length"
            )
        return annotation.head_len
    if spec.normalization == "bbox":
        pts = annotation.positions[annotation.visible]
        if len(pts) < 2:
            raise MetricError(
                f"sample {annotation.image_id!r}: bbox normalizer needs >= 2 "
                "visible joints"
            )
        span = pts.max(axis=0) - pts.min(axis=0)
        diag = float(np.hypot(span[0], span[1]))
        if diag <= 0:
            raise MetricError(
                f"sample {annotation.image_id!r}: degenerate bbox normalizer"
            )
        return diag
    if spec.normalization == "heatmap_tenth":
        # heatmap_resolution/10 measured in heatmap pixels equals
        # image_resolution/10 in image pixels.
        if image_resolution is None:
            raise MetricError("heatmap_tenth normalization needs image_resolution")
        return image_resolution / 10.0
    raise MetricError(f"unknown normalization {spec.normalization!r}")


def score(predictions, annotations, subset, spec, image_resolution=None):
    """Count correct keypoints under a MetricSpec and build the report.

    ``predictions`` is a list (one entry per sample) of mappings
    JointId -> (x, y, confidence) covering exactly the subset's joints;
    ``annotations`` the matching PoseAnnotation list.
    """
    if len(predictions) != len(annotations):
        raise MetricError(
            f"{len(predictions)} prediction sets vs {len(annotations)} annotations"
        )
    subset = tuple(subset)
    correct = {j: 0 for j in subset}
    total = {j: 0 for j in subset}
    for i, (pred, ann) in enumerate(zip(predictions, annotations)):
        if pred is None or ann is None:
            raise MetricError(f"sample {i}: missing prediction or annotation")
        if set(pred.keys()) != set(subset):
            raise MetricError(
                f"sample {i}: prediction joints do not match the evaluated subset"
            )
        norm = _normalizer(spec, ann, image_resolution)
        limit = spec.threshold * norm
        for j in subset:
            if not ann.visible[int(j)]:
                continue
            px, py, _ = pred[j]
            gx, gy = ann.positions[int(j)]
            total[j] += 1
            if math.hypot(px - gx, py - gy) < limit:
                correct[j] += 1

    report = MetricReport(
        metric=spec.label(),
        subset=subset,
        sample_count=len(annotations),
        joint_correct=correct,
        joint_total=total,
    )
    groups = {}
    for j in subset:
        g = JOINT_GROUPS[j]
        c, t = groups.get(g, (0, 0))
        groups[g] = (c + correct[j], t + total[j])
    for g, (c, t) in groups.items():
        report.group_scores[g] = (100.0 * c / t) if t else None
    included = report.included_groups()
    if included:
        report.average = float(np.mean([report.group_scores[g] for g in included]))
    return report


def pckh(predictions, annotations, subset, threshold=0.5):
    spec = MetricSpec(kind="pckh", threshold=threshold, normalization="head")
    return score(predictions, annotations, subset, spec)


def pck(predictions, annotations, subset, threshold=0.5, normalization="head",
        image_resolution=None):
    spec = MetricSpec(kind="pck", threshold=threshold, normalization=normalization)
    return score(predictions, annotations, subset, spec, image_resolution)


# --- model evaluation --------------------------------------------------------------


def predict(net, dataset, subset, batch_size=8):
    """Eval-mode forward over a dataset; decode the final unit's heatmaps.

    The last stack is the prediction; earlier heads exist only for
    intermediate supervision.
    """
    if dataset.resolution != net.arch.input_resolution:
        raise MetricError(
            f"dataset resolution {dataset.resolution} != network input "
            f"{net.arch.input_resolution}"
        )
    subset = tuple(subset)
    if net.head_channels[-1] != len(subset):
        raise MetricError(
            f"final head has {net.head_channels[-1]} channels but the subset "
            f"has {len(subset)} joints"
        )
    was_training = net.training
    net.eval()
    predictions = []
    try:
        with ad.no_grad():
            for start in range(0, len(dataset), batch_size):
                chunk = dataset.samples[start:start + batch_size]
                images = Tensor(np.stack([s.image for s in chunk]))
                heats = net.forward(images)[-1]
                for b in range(len(chunk)):
                    hm = Heatmap(maps=heats.data[b], subset=subset,
                                 image_resolution=dataset.resolution)
                    predictions.append(decode_heatmaps(hm))
    finally:
        net.training = was_training
    return predictions


def evaluate_model(net, dataset, subset, spec, batch_size=8):
    predictions = predict(net, dataset, subset, batch_size=batch_size)
    annotations = [s.annotation for s in dataset.samples]
    return score(predictions, annotations, tuple(subset), spec,
                 image_resolution=dataset.resolution)
