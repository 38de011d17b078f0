"""Quantitative evaluation: optical flow, depth, egomotion, event-rate study.

Depth metrics follow the classical scale-invariant suite:

    accuracy   fraction with max(y/y*, y*/y) below 1.25, 1.25^2, 1.25^3
    SILog      mean(d^2) - mean(d)^2,  d = log y - log y*
    AbsRel     mean(|y - y*| / y*)
    RMSElog    sqrt(mean((log y - log y*)^2))

Flow error is the average endpoint error with a KITTI-style outlier rule.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import (
    FlowField,
    InverseDepthMap,
    Pose,
    default_road_crop,
    scale_from_road_depth,
)

__all__ = [
    "EvalMask",
    "flow_aee",
    "depth_metrics",
    "pose_errors",
    "event_rate_report",
    "erate_filter",
    "write_report_csv",
]


@dataclass(frozen=True)
class EvalMask:
    """Boolean pixel mask; 'dense' covers everything, 'event-masked' keeps
    only pixels that saw at least one event in the middle slice."""

    values: np.ndarray
    kind: str = "dense"

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=bool))
        if self.kind not in ("dense", "event-masked"):
            raise ValueError(f"unknown mask kind {self.kind!r}")

    @classmethod
    def dense(cls, height, width):
        return cls(np.ones((height, width), dtype=bool), "dense")

    @classmethod
    def from_slice(cls, slice_image):
        return cls(slice_image.event_count() > 0, "event-masked")

    def count(self):
        return int(self.values.sum())


def flow_aee(pred: FlowField, gt: FlowField, mask: EvalMask, outlier_rule="and"):
    """Average endpoint error and outlier fraction over the mask.

    An outlier has endpoint error above 3 px and above 5% of the ground
    truth magnitude ('and', the KITTI convention); outlier_rule='or' treats
    either condition alone as an outlier.
    """
    if pred.u.shape != gt.u.shape or pred.u.shape != mask.values.shape:
        raise ValueError("flow and mask shapes must agree")
    m = mask.values
    if not m.any():
        raise ValueError("empty evaluation mask")
    err = np.hypot(pred.u - gt.u, pred.v - gt.v)[m]
    gt_mag = gt.magnitude()[m]
    if outlier_rule == "and":
        outliers = (err > 3.0) & (err > 0.05 * gt_mag)
    elif outlier_rule == "or":
        outliers = (err > 3.0) | (err > 0.05 * gt_mag)
    else:
        raise ValueError(f"unknown outlier rule {outlier_rule!r}")
    return float(err.mean()), float(outliers.mean())


def depth_metrics(pred, gt, mask: EvalMask):
    """Scale-invariant depth error suite over masked pixels.

    pred and gt are depth arrays (not inverse depth); both must be positive
    on the mask.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    m = mask.values
    if not m.any():
        raise ValueError("empty evaluation mask")
    y, ystar = pred[m], gt[m]
    if np.any(y <= 0) or np.any(ystar <= 0):
        raise ValueError("depth values must be positive on the mask")
    d = np.log(y) - np.log(ystar)
    ratio = np.maximum(y / ystar, ystar / y)
    return {
        "AbsRel": float(np.mean(np.abs(y - ystar) / ystar)),
        "RMSElog": float(np.sqrt(np.mean(d**2))),
        "SILog": float(np.mean(d**2) - np.mean(d) ** 2),
        "delta1": float(np.mean(ratio < 1.25)),
        "delta2": float(np.mean(ratio < 1.25**2)),
        "delta3": float(np.mean(ratio < 1.25**3)),
    }


def _rotation_from_pose(pose: Pose, dt: float):
    return Rotation.from_rotvec(pose.w * dt).as_matrix()


def pose_errors(pred, gt, dt, scale_mode="gt", depth_maps=None, target_road_depth=None):
    """Relative pose / rotation errors and translational endpoint error.

    RPE: angle in degrees between predicted and ground-truth translation
    directions, averaged; zero-norm translations are skipped and counted.
    RRE: Frobenius norm of logm(R_pred^T R_gt) in radians, averaged, with
    rotations integrated from the angular velocities over one interval dt.
    AEE_tr: mean translation magnitude error after rescaling the predicted
    translations; 'gt' matches each prediction's norm to the ground truth,
    'depth' uses per-frame road-depth constancy scales from depth_maps plus
    a single global factor fitted to the ground truth.
    """
    if len(pred) != len(gt):
        raise ValueError("pose sequences must have equal length")
    if scale_mode not in ("gt", "depth"):
        raise ValueError(f"unknown scale mode {scale_mode!r}")

    rpe_vals, skipped = [], 0
    for p, g in zip(pred, gt):
        np_, ng = np.linalg.norm(p.v), np.linalg.norm(g.v)
        if np_ < 1e-12 or ng < 1e-12:
            skipped += 1
            continue
        cosang = np.clip(np.dot(p.v, g.v) / (np_ * ng), -1.0, 1.0)
        rpe_vals.append(np.degrees(np.arccos(cosang)))

    rre_vals = []
    for p, g in zip(pred, gt):
        rel = _rotation_from_pose(p, dt).T @ _rotation_from_pose(g, dt)
        angle = np.linalg.norm(Rotation.from_matrix(rel).as_rotvec())
        rre_vals.append(angle * np.sqrt(2.0))

    if scale_mode == "gt":
        scaled = []
        for p, g in zip(pred, gt):
            np_ = np.linalg.norm(p.v)
            s = np.linalg.norm(g.v) / np_ if np_ > 1e-12 else 0.0
            scaled.append(s * p.v)
    else:
        if depth_maps is None or target_road_depth is None:
            raise ValueError("depth scale mode needs depth_maps and target_road_depth")
        per_frame = []
        for p, inv in zip(pred, depth_maps):
            crop = default_road_crop(inv.width, inv.height)
            s = scale_from_road_depth(inv, crop, target_road_depth)
            per_frame.append(s * p.v)
        num = sum(np.dot(t, g.v) for t, g in zip(per_frame, gt))
        den = sum(np.dot(t, t) for t in per_frame)
        global_scale = num / den if den > 1e-12 else 0.0
        scaled = [global_scale * t for t in per_frame]

    aee_tr = float(np.mean([np.linalg.norm(t - g.v) for t, g in zip(scaled, gt)]))
    return {
        "ARPE": float(np.mean(rpe_vals)) if rpe_vals else 0.0,
        "ARRE": float(np.mean(rre_vals)) if rre_vals else 0.0,
        "AEE_tr": aee_tr,
        "rpe_skipped": skipped,
    }


def event_rate_report(aee_per_frame, event_fraction_per_frame):
    """Series normalized to mean 0.5 plus their Pearson correlation.

    Returns (rows, correlation, degenerate) where rows are
    (index, normalized_aee, normalized_rate) tuples.  A series with zero
    variance yields correlation 0 with the degenerate flag set.
    """
    aee = np.asarray(aee_per_frame, dtype=np.float64)
    rate = np.asarray(event_fraction_per_frame, dtype=np.float64)
    if aee.shape != rate.shape:
        raise ValueError("series must have equal length")
    if aee.size < 3:
        raise ValueError("need at least 3 frames")
    norm_aee = aee * (0.5 / aee.mean()) if aee.mean() else aee
    norm_rate = rate * (0.5 / rate.mean()) if rate.mean() else rate
    degenerate = aee.std() == 0 or rate.std() == 0
    corr = 0.0 if degenerate else float(np.corrcoef(aee, rate)[0, 1])
    rows = [(i, float(a), float(r)) for i, (a, r) in enumerate(zip(norm_aee, norm_rate))]
    return rows, corr, degenerate


def erate_filter(event_fractions, threshold=None, recompute_mean=True):
    """Indices of frames whose event-pixel fraction strictly exceeds the mean
    (or a fixed threshold when recompute_mean is False)."""
    fractions = np.asarray(event_fractions, dtype=np.float64)
    if threshold is None or recompute_mean:
        threshold = fractions.mean() if fractions.size else 0.0
    return [i for i, f in enumerate(fractions) if f > threshold]


def write_report_csv(rows, path, header):
    """One row per sequence with all metric columns."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
