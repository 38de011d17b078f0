"""Rigid-motion image velocity, warping grids, trajectory integration.

Coordinates follow x right, y down, z forward.  The image velocity of a
pixel with calibrated coordinates (x, y) at inverse depth 1/Z under camera
velocity (v, w) is

    (u, v)^T = (1/Z) [-1 0 x; 0 -1 y] v + [xy -1-x^2 y; 1+y^2 -xy -x] w

in calibrated units; focal lengths convert to pixel units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

__all__ = [
    "Intrinsics",
    "Pose",
    "InverseDepthMap",
    "FlowField",
    "pixel_to_calibrated",
    "calibrated_to_pixel",
    "calibrated_grid",
    "motion_field",
    "flow_to_grid",
    "integrate_trajectory",
    "scale_from_road_depth",
    "default_road_crop",
    "read_calibration",
    "write_calibration",
]


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass(frozen=True)
class Pose:
    """Translational velocity v (scene units/s, up to scale) and rotational
    velocity w (rad/s)."""

    v: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.v, dtype=np.float64).reshape(3)
        w = np.asarray(self.w, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(w))):
            raise ValueError("pose components must be finite")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "w", w)

    @classmethod
    def zero(cls):
        return cls(np.zeros(3), np.zeros(3))

    def as_vector(self):
        return np.concatenate([self.v, self.w])


@dataclass(frozen=True)
class InverseDepthMap:
    values: np.ndarray  # (H, W) of 1/Z, strictly positive

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("inverse depth map must be 2-D")
        if not np.all(values > 0):
            raise ValueError("inverse depth must be strictly positive")
        object.__setattr__(self, "values", values)

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def height(self):
        return self.values.shape[0]

    def depth(self):
        return 1.0 / self.values


@dataclass(frozen=True)
class FlowField:
    """Per-pixel image velocity in pixels per slice interval."""

    u: np.ndarray  # (H, W)
    v: np.ndarray  # (H, W)

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.shape != v.shape or u.ndim != 2:
            raise ValueError("u and v must be 2-D arrays of equal shape")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("flow must be finite")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def width(self):
        return self.u.shape[1]

    @property
    def height(self):
        return self.u.shape[0]

    def magnitude(self):
        return np.hypot(self.u, self.v)


def pixel_to_calibrated(intr: Intrinsics, px, py):
    """(px - cx)/fx, (py - cy)/fy."""
    return (np.asarray(px) - intr.cx) / intr.fx, (np.asarray(py) - intr.cy) / intr.fy


def calibrated_to_pixel(intr: Intrinsics, x, y):
    return np.asarray(x) * intr.fx + intr.cx, np.asarray(y) * intr.fy + intr.cy


def calibrated_grid(intr: Intrinsics):
    """Calibrated coordinates of every pixel center, as two (H, W) arrays."""
    px, py = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    return pixel_to_calibrated(intr, px, py)


def motion_field(inv_depth: InverseDepthMap, pose: Pose, intr: Intrinsics) -> FlowField:
    """Image velocity induced by rigid motion, in pixels per unit time."""
    if (inv_depth.height, inv_depth.width) != (intr.height, intr.width):
        raise ValueError("inverse depth shape does not match intrinsics")
    x, y = calibrated_grid(intr)
    d = inv_depth.values
    vx, vy, vz = pose.v
    wx, wy, wz = pose.w
    u_cal = d * (-vx + x * vz) + (x * y * wx - (1.0 + x * x) * wy + y * wz)
    v_cal = d * (-vy + y * vz) + ((1.0 + y * y) * wx - x * y * wy - x * wz)
    return FlowField(u_cal * intr.fx, v_cal * intr.fy)


def flow_to_grid(flow: FlowField, dt_scale: float) -> np.ndarray:
    """Absolute sampling positions p + dt_scale * flow(p), shape (H, W, 2).

    The last axis is (x, y) in pixel coordinates; dt_scale is the signed
    frame offset of the neighbor being sampled.
    """
    px, py = np.meshgrid(np.arange(flow.width), np.arange(flow.height))
    return np.stack([px + dt_scale * flow.u, py + dt_scale * flow.v], axis=-1)


def integrate_trajectory(poses, dt: float):
    """Forward-Euler world-frame integration of velocity poses.

    Returns (positions, rotations): arrays of shape (n+1, 3) and (n+1, 3, 3)
    starting at the origin with identity rotation.  Each step applies the
    exact axis-angle exponential of w*dt.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    positions = [np.zeros(3)]
    rotations = [np.eye(3)]
    for pose in poses:
        r = rotations[-1]
        positions.append(positions[-1] + r @ pose.v * dt)
        rotations.append(r @ Rotation.from_rotvec(pose.w * dt).as_matrix())
    return np.array(positions), np.array(rotations)


def default_road_crop(width: int, height: int):
    """Lower-middle rectangle: horizontal [1/4, 3/4), vertical [3/4, 1)."""
    return (width // 4, 3 * height // 4, 3 * width // 4, height)


def scale_from_road_depth(depth: InverseDepthMap, crop, target_mean_depth: float) -> float:
    """Scale s such that the crop's mean depth times s equals the target.

    crop is (x0, y0, x1, y1) with half-open ranges.
    """
    x0, y0, x1, y1 = crop
    if target_mean_depth <= 0:
        raise ValueError("target mean depth must be positive")
    if not (0 <= x0 < x1 <= depth.width and 0 <= y0 < y1 <= depth.height):
        raise ValueError(f"empty or out-of-bounds crop {crop}")
    mean_depth = float(np.mean(depth.depth()[y0:y1, x0:x1]))
    return target_mean_depth / mean_depth


_CALIB_KEYS = ("fx", "fy", "cx", "cy", "width", "height")


def write_calibration(intr: Intrinsics, path) -> None:
    with open(path, "w") as f:
        for key in _CALIB_KEYS:
            f.write(f"{key}={getattr(intr, key)}\n")


def read_calibration(path) -> Intrinsics:
    values = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    missing = [k for k in _CALIB_KEYS if k not in values]
    if missing:
        raise ValueError(f"calibration file missing keys: {missing}")
    return Intrinsics(
        fx=float(values["fx"]),
        fy=float(values["fy"]),
        cx=float(values["cx"]),
        cy=float(values["cy"]),
        width=int(values["width"]),
        height=int(values["height"]),
    )
