"""Synthetic event scenes with exact depth, flow and pose ground truth.

Scenes are textured fronto-parallel planes viewed by a moving camera.  Log
intensity is rendered at fine substeps; a pixel emits an event whenever its
accumulated log-intensity change crosses a multiple of the contrast
threshold, with the timestamp interpolated inside the substep.  Ground-truth
depth comes from the nearest plane, ground-truth flow from the rigid-motion
field of that depth and the commanded camera velocity.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import diffcore as dc
from .events import EventStream, build_stack
from .geometry import (
    FlowField,
    Intrinsics,
    InverseDepthMap,
    Pose,
    calibrated_grid,
    motion_field,
    write_calibration,
)

__all__ = [
    "Plane",
    "SceneSpec",
    "SceneOutput",
    "default_scene_spec",
    "generate_scene",
    "make_stacks",
    "write_dataset",
    "read_dataset",
]


@dataclass(frozen=True)
class Plane:
    """Fronto-parallel textured plane at constant world depth.

    The extent (x0, x1, y0, y1) bounds the plane in world units; infinities
    give a background that covers every ray.
    """

    depth: float
    extent: tuple = (-np.inf, np.inf, -np.inf, np.inf)
    texture_scale: float = 0.25  # world units per texture period feature

    def __post_init__(self):
        if self.depth <= 0:
            raise ValueError("plane depth must be positive")


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    planes: tuple
    poses: tuple  # one Pose per slice, piecewise constant
    slice_dt: float = 1.0 / 40.0
    contrast_threshold: float = 0.15
    substeps: int = 8
    width: int = 64
    height: int = 64
    fx: float = 64.0
    fy: float = 64.0

    def __post_init__(self):
        if self.contrast_threshold <= 0:
            raise ValueError("contrast threshold must be positive")
        if self.substeps < 8:
            raise ValueError("at least 8 substeps per slice are required")
        if not self.planes:
            raise ValueError("scene needs at least one plane")

    @property
    def num_slices(self):
        return len(self.poses)

    @property
    def duration(self):
        return self.num_slices * self.slice_dt

    def intrinsics(self):
        return Intrinsics(
            self.fx, self.fy, self.width / 2.0, self.height / 2.0, self.width, self.height
        )


@dataclass(frozen=True)
class SceneOutput:
    spec: SceneSpec
    stream: EventStream
    inv_depths: tuple  # per-slice InverseDepthMap (at slice start)
    flows: tuple  # per-slice FlowField, pixels per slice interval
    poses: tuple  # per-slice Pose (velocities)


def default_scene_spec(seed=0, num_slices=24, width=64, height=64):
    """Layered desk-scale scene: near ground band, mid band, far background."""
    rng = np.random.default_rng(seed)
    near = 3.0 + rng.uniform(-0.5, 0.5)
    mid = 6.0 + rng.uniform(-1.0, 1.0)
    far = 14.0 + rng.uniform(-2.0, 2.0)
    planes = (
        # lower part of the image is close, like the ground ahead of the camera
        Plane(depth=near, extent=(-np.inf, np.inf, 0.12 * near, np.inf)),
        Plane(depth=mid, extent=(-np.inf, np.inf, -0.25 * mid, np.inf)),
        Plane(depth=far),
    )
    # a consistent sweep direction across scenes (driving-style statistics);
    # magnitude still varies, so poses must be read from the input stack
    vx = rng.uniform(5.0, 7.0)
    vz = rng.uniform(0.6, 1.8)
    wz = rng.uniform(-0.1, 0.1)
    poses = tuple(
        Pose(np.array([vx, 0.0, vz]), np.array([0.0, 0.0, wz]))
        for _ in range(num_slices)
    )
    # low threshold keeps the event images dense enough that warping by the
    # true flow clearly beats no warping
    return SceneSpec(
        seed=seed, planes=planes, poses=poses, width=width, height=height,
        fx=float(width), fy=float(height), contrast_threshold=0.03,
    )


def _make_texture(rng, size=256, blob_sigma=2.0, amplitude=1.2):
    """Binary blob texture smoothed so edges span a few texels."""
    noise = gaussian_filter(rng.standard_normal((size, size)), blob_sigma)
    blobs = (noise > 0).astype(np.float64)
    return gaussian_filter(blobs, 1.0) * amplitude


def _sample_texture(tex, u, v):
    """Bilinear, periodic lookup at fractional texel coordinates."""
    size = tex.shape[0]
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu, fv = u - u0, v - v0
    u0 %= size
    v0 %= size
    u1, v1 = (u0 + 1) % size, (v0 + 1) % size
    return (
        tex[v0, u0] * (1 - fv) * (1 - fu)
        + tex[v0, u1] * (1 - fv) * fu
        + tex[v1, u0] * fv * (1 - fu)
        + tex[v1, u1] * fv * fu
    )


def _render(spec, textures, position, rotation):
    """Log intensity and camera-frame depth for every pixel."""
    intr = spec.intrinsics()
    x, y = calibrated_grid(intr)
    dirs = np.stack([x, y, np.ones_like(x)], axis=-1) @ rotation.T
    depth_cam = np.full((spec.height, spec.width), np.inf)
    log_int = np.zeros((spec.height, spec.width))
    for plane, tex in zip(spec.planes, textures):
        # keep the angular size of texture features roughly depth-independent
        texels_per_unit = 48.0 / (plane.depth * plane.texture_scale * 4.0)
        dz = dirs[..., 2]
        lam = np.where(dz > 1e-9, (plane.depth - position[2]) / np.maximum(dz, 1e-9), np.inf)
        px = position[0] + lam * dirs[..., 0]
        py = position[1] + lam * dirs[..., 1]
        x0, x1, y0, y1 = plane.extent
        hit = (lam > 0) & np.isfinite(lam) & (px >= x0) & (px <= x1) & (py >= y0) & (py <= y1)
        # camera-frame depth of the hit point
        zc = lam * dz
        closer = hit & (zc < depth_cam)
        if np.any(closer):
            vals = _sample_texture(
                tex, px[closer] * texels_per_unit, py[closer] * texels_per_unit
            )
            log_int[closer] = vals
            depth_cam[closer] = zc[closer]
    return log_int, depth_cam


def _camera_states(spec, times):
    """Position/rotation at each requested time by piecewise integration."""
    from scipy.spatial.transform import Rotation

    positions, rotations = [], []
    p = np.zeros(3)
    r = np.eye(3)
    t_prev = 0.0
    for t in times:
        while t_prev < t - 1e-12:
            idx = min(int(t_prev / spec.slice_dt + 1e-9), spec.num_slices - 1)
            seg_end = min((idx + 1) * spec.slice_dt, t)
            h = seg_end - t_prev
            pose = spec.poses[idx]
            p = p + r @ pose.v * h
            r = r @ Rotation.from_rotvec(pose.w * h).as_matrix()
            t_prev = seg_end
        positions.append(p.copy())
        rotations.append(r.copy())
    return positions, rotations


def generate_scene(spec: SceneSpec) -> SceneOutput:
    """Render the scene and emit threshold-crossing events."""
    rng = np.random.default_rng(spec.seed)
    textures = [_make_texture(rng) for _ in spec.planes]
    intr = spec.intrinsics()

    n_steps = spec.num_slices * spec.substeps
    times = [k * spec.slice_dt / spec.substeps for k in range(n_steps + 1)]
    positions, rotations = _camera_states(spec, times)

    theta = spec.contrast_threshold
    log_prev, _ = _render(spec, textures, positions[0], rotations[0])
    ref = log_prev.copy()
    ev_t, ev_x, ev_y, ev_p = [], [], [], []
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]

    inv_depths, flows, gt_poses = [], [], []
    for k in range(n_steps):
        if k % spec.substeps == 0:
            s = k // spec.substeps
            _, depth_cam = _render(spec, textures, positions[k], rotations[k])
            inv = InverseDepthMap(1.0 / np.clip(depth_cam, 1e-6, 1e6))
            pose = spec.poses[s]
            mf = motion_field(inv, pose, intr)
            flows.append(FlowField(mf.u * spec.slice_dt, mf.v * spec.slice_dt))
            inv_depths.append(inv)
            gt_poses.append(pose)

        log_new, _ = _render(spec, textures, positions[k + 1], rotations[k + 1])
        diff = log_new - ref
        n_cross = np.floor(np.abs(diff) / theta).astype(np.int64)
        sign = np.sign(diff).astype(np.int64)
        active = n_cross > 0
        if np.any(active):
            counts = n_cross[active]
            pix_x = np.repeat(xx[active], counts)
            pix_y = np.repeat(yy[active], counts)
            pol = np.repeat(sign[active], counts)
            # event index within the pixel's burst: 1..count
            within = np.concatenate([np.arange(1, c + 1) for c in counts])
            # linear interpolation of the crossing instant inside the substep
            delta = (log_new - log_prev)[active]
            start = (ref - log_prev)[active]
            frac = (np.repeat(start, counts) + within * theta * pol) / np.repeat(
                np.where(np.abs(delta) > 1e-12, delta, 1.0), counts
            )
            frac = np.clip(frac, 0.0, 1.0)
            t0, t1 = times[k], times[k + 1]
            ev_t.append(t0 + frac * (t1 - t0))
            ev_x.append(pix_x)
            ev_y.append(pix_y)
            ev_p.append(pol)
            ref[active] += n_cross[active] * theta * sign[active]
        log_prev = log_new

    if ev_t:
        t = np.concatenate(ev_t)
        x = np.concatenate(ev_x)
        y = np.concatenate(ev_y)
        p = np.concatenate(ev_p)
    else:
        t = np.zeros(0)
        x = np.zeros(0, dtype=np.int64)
        y = np.zeros(0, dtype=np.int64)
        p = np.zeros(0, dtype=np.int64)
    # quantize to microseconds so EVT1 round trips are exact
    t = np.round(t * 1e6) / 1e6
    order = np.lexsort((p, x, y, t))
    stream = EventStream(spec.width, spec.height, t[order], x[order], y[order], p[order])
    return SceneOutput(
        spec=spec,
        stream=stream,
        inv_depths=tuple(inv_depths),
        flows=tuple(flows),
        poses=tuple(gt_poses),
    )


def make_stacks(scene: SceneOutput, n=5):
    """All full stacks of n consecutive slices with middle-slice ground truth.

    Returns a list of (SliceStack, gt_inv_depth, gt_flow, gt_pose).
    """
    spec = scene.spec
    out = []
    for start in range(spec.num_slices - n + 1):
        stack = build_stack(scene.stream, start * spec.slice_dt, spec.slice_dt, n)
        mid = start + n // 2
        out.append((stack, scene.inv_depths[mid], scene.flows[mid], scene.poses[mid]))
    return out


def write_dataset(scene: SceneOutput, directory):
    """events.evt + calib.txt + per-slice depth/flow tensors + poses.csv."""
    from .events import write_events

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_events(scene.stream, directory / "events.evt")
    write_calibration(scene.spec.intrinsics(), directory / "calib.txt")
    for i, (inv, flow) in enumerate(zip(scene.inv_depths, scene.flows)):
        dc.write_tensor_file(inv.values, directory / f"depth_{i:05d}.ten")
        dc.write_tensor_file(np.stack([flow.u, flow.v]), directory / f"flow_{i:05d}.ten")
    with open(directory / "poses.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "vx", "vy", "vz", "wx", "wy", "wz"])
        for i, pose in enumerate(scene.poses):
            writer.writerow(
                [f"{i * scene.spec.slice_dt:.6f}"]
                + [f"{v:.9g}" for v in np.concatenate([pose.v, pose.w])]
            )


def read_dataset(directory):
    """Load a written dataset back: (stream, intrinsics, depths, flows, poses)."""
    from .events import read_events
    from .geometry import read_calibration

    directory = Path(directory)
    stream = read_events(directory / "events.evt")
    intr = read_calibration(directory / "calib.txt")
    depths, flows = [], []
    i = 0
    while (directory / f"depth_{i:05d}.ten").exists():
        depths.append(InverseDepthMap(dc.read_tensor_file(directory / f"depth_{i:05d}.ten")))
        uv = dc.read_tensor_file(directory / f"flow_{i:05d}.ten")
        flows.append(FlowField(uv[0], uv[1]))
        i += 1
    poses = []
    with open(directory / "poses.csv") as f:
        for row in csv.DictReader(f):
            poses.append(
                Pose(
                    np.array([float(row["vx"]), float(row["vy"]), float(row["vz"])]),
                    np.array([float(row["wx"]), float(row["wy"]), float(row["wz"])]),
                )
            )
    return stream, intr, depths, flows, poses
