"""Tracking evaluation: overlap/precision metrics and threshold curves.

Conventions, fixed and tested: success counts IoU >= threshold, distance
precision counts error <= threshold, the strict-overlap rate counts
IoU > 0.5 only.  Normalized distance divides the center error by the
ground-truth box diagonal.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box, intersection_area
from .errors import DomainError

SUC_THRESHOLDS = tuple(np.round(np.arange(0.0, 1.0001, 0.05), 2).tolist())
PR_THRESHOLDS = tuple(float(v) for v in range(0, 51))
NPR_THRESHOLDS = tuple(np.round(np.arange(0.0, 0.5001, 0.025), 3).tolist())


def iou(a: Box, b: Box) -> float:
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def center_distance(a: Box, b: Box) -> float:
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by)


def occlusion_recovery(pred_boxes, gt_boxes, visibility,
                       window: int = 5) -> bool:
    """True when the tracker re-attains IoU > 0.5 within `window` frames of
    the target reappearing after its last fully-hidden frame."""
    if len(pred_boxes) != len(gt_boxes) or len(gt_boxes) != len(visibility):
        raise DomainError("prediction/ground-truth/visibility lengths disagree")
    hidden = [t for t, v in enumerate(visibility) if v == 0.0]
    if not hidden:
        raise DomainError("sequence has no fully-hidden frame")
    reappear = max(hidden) + 1
    if reappear >= len(gt_boxes):
        raise DomainError("target never reappears")
    stop = min(reappear + window, len(gt_boxes))
    return any(iou(pred_boxes[t], gt_boxes[t]) > 0.5
               for t in range(reappear, stop))


@dataclass
class MetricReport:
    suc: float
    pr: float
    npr: float
    ao: float
    op50: float
    suc_curve: dict = field(default_factory=dict)
    pr_curve: dict = field(default_factory=dict)
    npr_curve: dict = field(default_factory=dict)
    num_frames: int = 0

    def scalars(self) -> dict:
        return {"suc": self.suc, "pr": self.pr, "npr": self.npr,
                "ao": self.ao, "op50": self.op50}

    def to_json(self) -> str:
        data = dict(self.scalars())
        data["num_frames"] = self.num_frames
        data["curves"] = {
            "suc": self.suc_curve, "pr": self.pr_curve, "npr": self.npr_curve,
        }
        return json.dumps(data, indent=2, sort_keys=True)

    def curves_csv(self) -> str:
        lines = ["metric,threshold,rate"]
        for name, curve in (("suc", self.suc_curve), ("pr", self.pr_curve),
                            ("npr", self.npr_curve)):
            for thr in sorted(curve):
                lines.append(f"{name},{thr},{curve[thr]}")
        return "\n".join(lines) + "\n"


def eval_sequence(pred_boxes, gt_boxes, precision_threshold: float = 20.0,
                  norm_precision_threshold: float = 0.2) -> MetricReport:
    if len(pred_boxes) != len(gt_boxes):
        raise DomainError(
            f"{len(pred_boxes)} predictions for {len(gt_boxes)} ground-truth frames"
        )
    if len(gt_boxes) == 0:
        raise DomainError("empty sequence")
    n = len(gt_boxes)
    ious = [iou(p, g) for p, g in zip(pred_boxes, gt_boxes)]
    dists = [center_distance(p, g) for p, g in zip(pred_boxes, gt_boxes)]
    ndists = [d / g.diagonal for d, g in zip(dists, gt_boxes)]

    suc_curve = {
        thr: sum(1 for v in ious if v >= thr) / n for thr in SUC_THRESHOLDS
    }
    pr_curve = {
        thr: sum(1 for v in dists if v <= thr) / n for thr in PR_THRESHOLDS
    }
    npr_curve = {
        thr: sum(1 for v in ndists if v <= thr) / n for thr in NPR_THRESHOLDS
    }
    suc = sum(suc_curve[t] for t in SUC_THRESHOLDS) / len(SUC_THRESHOLDS)
    pr = sum(1 for v in dists if v <= precision_threshold) / n
    npr = sum(1 for v in ndists if v <= norm_precision_threshold) / n
    ao = sum(ious) / n
    op50 = sum(1 for v in ious if v > 0.5) / n
    return MetricReport(suc=suc, pr=pr, npr=npr, ao=ao, op50=op50,
                        suc_curve=suc_curve, pr_curve=pr_curve,
                        npr_curve=npr_curve, num_frames=n)


def aggregate_reports(reports) -> MetricReport:
    """Average per-sequence metrics (every sequence weighs the same)."""
    reports = list(reports)
    if not reports:
        raise DomainError("nothing to aggregate")
    k = len(reports)

    def mean_curve(getter, thresholds):
        return {t: sum(getter(r)[t] for r in reports) / k for t in thresholds}

    return MetricReport(
        suc=sum(r.suc for r in reports) / k,
        pr=sum(r.pr for r in reports) / k,
        npr=sum(r.npr for r in reports) / k,
        ao=sum(r.ao for r in reports) / k,
        op50=sum(r.op50 for r in reports) / k,
        suc_curve=mean_curve(lambda r: r.suc_curve, SUC_THRESHOLDS),
        pr_curve=mean_curve(lambda r: r.pr_curve, PR_THRESHOLDS),
        npr_curve=mean_curve(lambda r: r.npr_curve, NPR_THRESHOLDS),
        num_frames=sum(r.num_frames for r in reports),
    )
