"""Self-supervised training: warp neighbor slices onto the middle slice.

The depth network sees the middle slice; the pose network sees the whole
stack and produces one 6-vector per neighbor offset.  Rigid-motion flow
synthesized from both warps each neighbor onto the middle slice and the
masked l1 warping difference, plus a multi-scale smoothness term on the
inverse depth, drives Adam with a cosine-annealed learning rate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .ecn import POSE_OFFSETS, EcnConfig, build_networks
from .events import SliceStack, slice_to_tensor, stack_to_tensor
from .geometry import FlowField, Intrinsics, InverseDepthMap, Pose, motion_field

__all__ = [
    "TrainConfig",
    "LossReport",
    "StackDataset",
    "flow_tensor",
    "warp_neighbors",
    "photometric_loss",
    "smoothness_loss",
    "compute_losses",
    "train_step",
    "train",
    "infer",
    "save_networks",
    "load_networks",
]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    lr0: float = 0.01
    smoothness_weight: float = 0.1
    slice_dt: float = 1.0 / 40.0
    seed: int = 0
    norm_kind: str = "batch"
    depth_normalization: bool = False
    constant_velocity: bool = False

    def __post_init__(self):
        for name in ("batch_size", "epochs", "lr0", "smoothness_weight", "slice_dt"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class LossReport:
    photometric: float
    smoothness: float
    total: float
    valid_pixel_fraction: float

    def __post_init__(self):
        for v in (self.photometric, self.smoothness, self.total, self.valid_pixel_fraction):
            if not np.isfinite(v):
                raise ValueError("loss report values must be finite")


class StackDataset:
    """Slice stacks packed into arrays ready for batching.

    input_stacks: (M, 15, H, W); middles: (M, 3, H, W);
    neighbors: (M, 4, 3, H, W) ordered by offset (-2, -1, +1, +2).
    Optional ground truth rides along for evaluation.
    """

    def __init__(self, stacks, gt=None):
        inputs, middles, neighbors = [], [], []
        for stack in stacks:
            if len(stack) != 5:
                raise ValueError("training stacks must hold 5 slices")
            inputs.append(stack_to_tensor(stack))
            middles.append(slice_to_tensor(stack.middle))
            neighbors.append(
                np.stack(
                    [
                        slice_to_tensor(stack.slices[stack.middle_index + o])
                        for o in POSE_OFFSETS
                    ]
                )
            )
        self.input_stacks = np.stack(inputs).astype(np.float32)
        self.middles = np.stack(middles).astype(np.float32)
        self.neighbors = np.stack(neighbors).astype(np.float32)
        self.stacks = list(stacks)
        self.gt = gt

    def __len__(self):
        return self.input_stacks.shape[0]

    @property
    def image_hw(self):
        return self.input_stacks.shape[2], self.input_stacks.shape[3]

    def batch(self, indices):
        return (
            self.input_stacks[indices],
            self.middles[indices],
            self.neighbors[indices],
        )


def _calibrated_grids(intr, dtype):
    px, py = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    x = ((px - intr.cx) / intr.fx).astype(dtype)[None, None]
    y = ((py - intr.cy) / intr.fy).astype(dtype)[None, None]
    return x, y


def flow_tensor(inv_depth, pose6, intr):
    """Differentiable rigid-motion flow in pixels per slice interval.

    inv_depth: (N, 1, H, W) tensor; pose6: (N, 6) tensor of per-interval
    (v, w).  Returns (u, v) tensors of shape (N, 1, H, W).
    """
    inv_depth = dc.as_tensor(inv_depth)
    pose6 = dc.as_tensor(pose6)
    x, y = _calibrated_grids(intr, inv_depth.dtype)
    x, y = Tensor(x), Tensor(y)
    n = pose6.shape[0]

    def comp(i):
        return dc.reshape(pose6[:, i : i + 1], (n, 1, 1, 1))

    vx, vy, vz = comp(0), comp(1), comp(2)
    wx, wy, wz = comp(3), comp(4), comp(5)
    u_cal = inv_depth * (x * vz - vx) + (x * y * wx - (x * x + 1.0) * wy + y * wz)
    v_cal = inv_depth * (y * vz - vy) + ((y * y + 1.0) * wx - x * y * wy - x * wz)
    return u_cal * intr.fx, v_cal * intr.fy


def _base_grid(n, h, w, dtype):
    px, py = np.meshgrid(np.arange(w), np.arange(h))
    base = np.stack([px, py], axis=-1).astype(dtype)
    return np.broadcast_to(base, (n, h, w, 2))


def warp_neighbors(neighbors, inv_depth, poses, intr, constant_velocity=False):
    """Warp the four neighbor slices toward the middle slice.

    neighbors: (N, 4, 3, H, W) tensor or array; inv_depth: (N, 1, H, W);
    poses: (N, 4, 6).  Each offset o uses its own pose (or the +1/-1 pose
    scaled linearly in constant-velocity mode) and a sampling grid displaced
    by o times the synthesized flow.  Returns (warped list, mask list);
    masks are numpy booleans marking in-bounds samples.
    """
    neighbors = dc.as_tensor(neighbors)
    inv_depth = dc.as_tensor(inv_depth)
    poses = dc.as_tensor(poses)
    n, _, _, h, w = neighbors.shape
    base = _base_grid(n, h, w, inv_depth.dtype)
    warped, masks = [], []
    for i, offset in enumerate(POSE_OFFSETS):
        if constant_velocity:
            # reuse the +1 (or -1) pose; the grid scales it by the offset
            pose = poses[:, (2 if offset > 0 else 1), :]
        else:
            pose = poses[:, i, :]
        u, v = flow_tensor(inv_depth, pose, intr)
        disp = dc.concat(
            [
                dc.reshape(u, (n, h, w, 1)),
                dc.reshape(v, (n, h, w, 1)),
            ],
            axis=3,
        )
        grid = disp * float(offset) + Tensor(base.copy())
        masks.append(dc.sample_mask(grid.data, h, w))
        warped.append(dc.bilinear_sample(neighbors[:, i], grid))
    return warped, masks


def photometric_loss(middle, warped, masks):
    """Mean masked l1 difference, averaged over the neighbors.

    Returns (loss tensor, valid fraction, empty-mask count).
    """
    middle = dc.as_tensor(middle)
    channels = middle.shape[1]
    terms = []
    empty = 0
    valid_total = 0
    pixel_total = 0
    for w, m in zip(warped, masks):
        count = int(m.sum())
        pixel_total += m.size
        valid_total += count
        if count == 0:
            empty += 1
            continue
        mask_t = Tensor(m[:, None].astype(middle.dtype))
        diff = dc.absolute(w - middle) * mask_t
        terms.append(dc.tsum(diff) * (1.0 / (channels * count)))
    if not terms:
        return Tensor(np.zeros((), dtype=middle.dtype)), 0.0, empty
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    return loss * (1.0 / len(warped)), valid_total / pixel_total, empty


def smoothness_loss(inv_depth_maps, scale):
    """Mean absolute first differences, coarse maps downweighted by scale^level."""
    total = None
    n_maps = len(inv_depth_maps)
    for i, m in enumerate(inv_depth_maps):
        weight = scale ** (n_maps - 1 - i)
        dx = dc.tmean(dc.absolute(m[:, :, :, 1:] - m[:, :, :, :-1]))
        dy = dc.tmean(dc.absolute(m[:, :, 1:, :] - m[:, :, :-1, :]))
        term = (dx + dy) * weight
        total = term if total is None else total + term
    return total


def compute_losses(depth_net, pose_net, inputs, middles, neighbors, intr, config,
                   training=True):
    """Forward both networks and assemble the total loss.

    Returns (total tensor, report fields dict)."""
    middle_t = Tensor(middles)
    inv_maps = depth_net.inverse_depths(middle_t, training=training)
    poses = pose_net.forward(Tensor(inputs), training=training)
    warped, masks = warp_neighbors(
        Tensor(neighbors), inv_maps[-1], poses, intr,
        constant_velocity=config.constant_velocity,
    )
    photo, valid_fraction, empty = photometric_loss(middle_t, warped, masks)
    smooth = smoothness_loss(inv_maps, depth_net.config.encode_scale)
    total = photo + smooth * config.smoothness_weight
    fields = {
        "photometric": float(photo.data),
        "smoothness": float(smooth.data),
        "total": float(total.data),
        "valid_pixel_fraction": valid_fraction,
        "empty_masks": empty,
    }
    return total, fields


def train_step(depth_net, pose_net, optimizer, batch, intr, config, lr):
    """One optimization step; raises on a non-finite loss."""
    inputs, middles, neighbors = batch
    optimizer.zero_grad()
    total, fields = compute_losses(
        depth_net, pose_net, inputs, middles, neighbors, intr, config
    )
    if not np.isfinite(fields["total"]):
        finite = [
            i
            for i in range(inputs.shape[0])
            if not np.all(np.isfinite(inputs[i]))
        ]
        raise RuntimeError(
            f"non-finite loss {fields['total']}; suspicious batch indices {finite}"
        )
    total.backward()
    optimizer.step(lr=lr)
    return LossReport(
        photometric=fields["photometric"],
        smoothness=fields["smoothness"],
        total=fields["total"],
        valid_pixel_fraction=fields["valid_pixel_fraction"],
    )


def train(dataset, intr, config: TrainConfig, ecn_config: EcnConfig | None = None,
          steps=None, log_path=None):
    """Full training run; returns (depth_net, pose_net, history).

    history is a list of (step, lr, photometric, smoothness, total,
    valid_fraction) rows, also written as CSV when log_path is given.
    """
    if ecn_config is None:
        ecn_config = EcnConfig(
            norm_kind=config.norm_kind, depth_normalization=config.depth_normalization
        )
    h, w = dataset.image_hw
    depth_net, pose_net = build_networks(ecn_config, (h, w), seed=config.seed)
    params = depth_net.params() + pose_net.params()
    optimizer = dc.Adam(params, lr=config.lr0)
    rng = np.random.default_rng(config.seed)

    steps_per_epoch = max(1, len(dataset) // config.batch_size)
    total_steps = steps if steps is not None else config.epochs * steps_per_epoch
    history = []
    for step in range(total_steps):
        indices = rng.choice(len(dataset), size=min(config.batch_size, len(dataset)),
                             replace=False)
        lr = dc.cosine_lr(step, total_steps, config.lr0)
        report = train_step(
            depth_net, pose_net, optimizer, dataset.batch(indices), intr, config, lr
        )
        history.append(
            (
                step,
                lr,
                report.photometric,
                report.smoothness,
                report.total,
                report.valid_pixel_fraction,
            )
        )
    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(
                ["step", "lr", "photometric", "smoothness", "total", "valid_fraction"]
            )
            for row in history:
                writer.writerow([row[0]] + [f"{v:.9g}" for v in row[1:]])
    return depth_net, pose_net, history


def infer(depth_net, pose_net, stack: SliceStack, intr: Intrinsics, slice_dt):
    """Inverse depth, per-second egomotion and flow for one stack."""
    middle = slice_to_tensor(stack.middle)[None].astype(np.float32)
    inputs = stack_to_tensor(stack)[None].astype(np.float32)
    inv = depth_net.inverse_depths(Tensor(middle), training=False)[-1]
    poses = pose_net.forward(Tensor(inputs), training=False)
    # offset +1 pose, converted from per-interval motion to per-second velocity
    p1 = poses.data[0, 2]
    pose = Pose(p1[:3] / slice_dt, p1[3:] / slice_dt)
    inv_map = InverseDepthMap(np.maximum(inv.data[0, 0], 1e-9).astype(np.float64))
    mf = motion_field(inv_map, pose, intr)
    flow = FlowField(mf.u * slice_dt, mf.v * slice_dt)
    return inv_map, flow, pose


def save_networks(depth_net, pose_net, path):
    state = {f"depth.{k}": v for k, v in depth_net.state_dict().items()}
    state.update({f"pose.{k}": v for k, v in pose_net.state_dict().items()})
    dc.save_checkpoint(state, path)


def load_networks(depth_net, pose_net, path):
    state = dc.load_checkpoint(path)
    depth_net.load_state_dict(
        {k[len("depth."):]: v for k, v in state.items() if k.startswith("depth.")}
    )
    pose_net.load_state_dict(
        {k[len("pose."):]: v for k, v in state.items() if k.startswith("pose.")}
    )
