"""Evenly-cascaded depth and pose networks.

Each encoding layer carries two streams: a convolution modulating the
bilinearly downsampled existing features (a residual path that keeps the
backbone unblocked), and a convolution growing a fixed number of new
higher-level channels.  Decoding mirrors the encoder, merging the features
and the encoder skip back into the upsampled lower-level channels.  Depth
is predicted at multiple scales, coarse first, with finer heads adding
residues to the upsampled previous prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import decorr
from . import diffcore as dc
from .diffcore import Tensor

__all__ = [
    "EcnConfig",
    "LayerPlan",
    "plan_layers",
    "DepthNet",
    "PoseNet",
    "build_networks",
    "count_params",
    "POSE_OFFSETS",
]

POSE_OFFSETS = (-2, -1, 1, 2)
TRANSLATION_OUTPUT_SCALE = 0.01
ROTATION_OUTPUT_SCALE = 0.01
DEPTH_MEAN_TARGET = 1.0


@dataclass(frozen=True)
class EcnConfig:
    encode_scale: float = 0.5
    initial_channels: int = 8
    growth_rate: int = 8
    min_feature_size: int = 8
    input_channels: int = 3
    norm_kind: str = "batch"  # batch | group | decorrelate
    norm_groups: int = 16
    decorr_iters: int = 5
    depth_normalization: bool = False
    num_pred_scales: int = 3
    dtype: type = np.float32

    def __post_init__(self):
        if not 0.0 < self.encode_scale < 1.0:
            raise ValueError("encode_scale must lie in (0, 1)")
        if self.growth_rate < 1:
            raise ValueError("growth_rate must be >= 1")
        if self.min_feature_size < 2:
            raise ValueError("min_feature_size must be >= 2")
        if self.norm_kind not in ("batch", "group", "decorrelate"):
            raise ValueError(f"unknown norm_kind {self.norm_kind!r}")

    @property
    def decode_scale(self):
        return 1.0 / self.encode_scale


@dataclass(frozen=True)
class LayerPlan:
    """Spatial sizes per level; sizes[0] is the input, sizes[-1] the coarsest."""

    sizes: tuple
    initial_channels: int
    growth_rate: int

    @property
    def num_layers(self):
        return len(self.sizes) - 1

    def channels_at(self, level):
        return self.initial_channels + level * self.growth_rate

    def summary(self):
        lines = []
        c0, g, n = self.initial_channels, self.growth_rate, self.num_layers
        for k in range(n):
            lines.append(
                f"encode {c0 + k * g}->{c0 + (k + 1) * g} "
                f"{self.sizes[k][0]}x{self.sizes[k][1]}->"
                f"{self.sizes[k + 1][0]}x{self.sizes[k + 1][1]}"
            )
        for k in range(n):
            cin = c0 + (n - k) * g
            lines.append(
                f"decode {cin}->{cin - g} "
                f"{self.sizes[n - k][0]}x{self.sizes[n - k][1]}->"
                f"{self.sizes[n - k - 1][0]}x{self.sizes[n - k - 1][1]}"
            )
        return "\n".join(lines)


def plan_layers(config: EcnConfig, input_h: int, input_w: int) -> LayerPlan:
    """Downscale by the encode factor until the next size would fall below
    the minimum feature size; the decoder mirrors the recorded sizes."""
    s = config.encode_scale
    sizes = [(input_h, input_w)]
    while True:
        h, w = sizes[-1]
        nxt = (dc.resize_shape(h, s), dc.resize_shape(w, s))
        if min(nxt) < config.min_feature_size:
            break
        sizes.append(nxt)
    if len(sizes) < 2:
        raise ValueError(
            f"input {input_h}x{input_w} admits no encoding layer above the "
            f"minimum feature size {config.min_feature_size}"
        )
    return LayerPlan(tuple(sizes), config.initial_channels, config.growth_rate)


# -- module plumbing -------------------------------------------------------


class Module:
    """Parameter/buffer discovery via attribute walking, insertion-ordered."""

    def params(self):
        return [t for _, t in self.named_params()]

    def named_params(self, prefix=""):
        out = []
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            out.extend(_collect(value, name, want_params=True))
        return out

    def named_buffers(self, prefix=""):
        out = []
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            out.extend(_collect(value, name, want_params=False))
        return out

    def state_dict(self):
        state = {name: t.data.copy() for name, t in self.named_params()}
        state.update({name: a.copy() for name, a in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        for name, t in self.named_params():
            t.data = np.asarray(state[name], dtype=t.data.dtype).reshape(t.shape)
        for name, a in self.named_buffers():
            a[...] = np.asarray(state[name]).reshape(a.shape)


def _collect(value, name, want_params):
    if isinstance(value, Tensor):
        return [(name, value)] if (want_params and value.requires_grad) else []
    if isinstance(value, Module):
        if want_params:
            return value.named_params(prefix=name + ".")
        return value.named_buffers(prefix=name + ".")
    if isinstance(value, (list, tuple)):
        out = []
        for i, item in enumerate(value):
            out.extend(_collect(item, f"{name}.{i}", want_params))
        return out
    if not want_params and isinstance(value, np.ndarray) and name.rsplit(".", 1)[-1].startswith(
        ("running_", "frozen_")
    ):
        return [(name, value)]
    return []


class Conv3x3(Module):
    def __init__(self, rng, cin, cout, dtype):
        scale = math.sqrt(2.0 / (9 * cin))
        self.weight = Tensor(
            rng.normal(0.0, scale, (cout, cin, 3, 3)).astype(dtype), requires_grad=True
        )
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return dc.conv2d(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, rng, cin, cout, dtype):
        scale = math.sqrt(1.0 / cin)
        self.weight = Tensor(
            rng.normal(0.0, scale, (cin, cout)).astype(dtype), requires_grad=True
        )
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return dc.matmul(x, self.weight) + self.bias


class BatchNorm(Module):
    def __init__(self, channels, dtype):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)

    def __call__(self, x, training):
        return dc.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, training
        )


class GroupNorm(Module):
    def __init__(self, channels, groups, dtype):
        self.groups = math.gcd(groups, channels)
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, x, training):
        return dc.group_norm(x, self.groups, self.gamma, self.beta)


class DecorrelateNorm(Module):
    """Grouped whitening; the last training transform is frozen for eval."""

    def __init__(self, channels, groups, iters, dtype):
        self.groups = math.gcd(groups, channels)
        self.iters = iters
        self.frozen_wmat = np.eye(self.groups)
        self.frozen_mu = np.zeros(self.groups)

    def __call__(self, x, training):
        if training:
            out, wmat, mu = decorr.decorrelate_features(
                x, groups=self.groups, iters=self.iters
            )
            self.frozen_wmat[...] = wmat
            self.frozen_mu[...] = mu
            return out
        return decorr.apply_whitening(x, self.groups, self.frozen_wmat, self.frozen_mu)


def _make_norm(config, channels):
    if config.norm_kind == "batch":
        return BatchNorm(channels, config.dtype)
    if config.norm_kind == "group":
        return GroupNorm(channels, config.norm_groups, config.dtype)
    return DecorrelateNorm(
        channels, config.norm_groups, config.decorr_iters, config.dtype
    )


# -- cascade layers --------------------------------------------------------


class EncodeLayer(Module):
    def __init__(self, rng, config, cin, out_size):
        self.out_size = out_size
        self.norm = _make_norm(config, cin)
        self.conv_mod = Conv3x3(rng, cin, cin, config.dtype)
        self.conv_new = Conv3x3(rng, cin, config.growth_rate, config.dtype)

    def __call__(self, x, training):
        down = dc.bilinear_resize(x, size=self.out_size)
        pre = dc.leaky_relu(self.norm(down, training))
        mod = self.conv_mod(pre)
        new = dc.leaky_relu(self.conv_new(pre))
        return dc.concat([down + mod, new], axis=1)


class DecodeLayer(Module):
    def __init__(self, rng, config, cin, skip_channels, out_size):
        self.out_size = out_size
        self.cin = cin
        self.growth = config.growth_rate
        self.norm = _make_norm(config, cin + skip_channels)
        self.conv = Conv3x3(rng, cin + skip_channels, cin - config.growth_rate, config.dtype)

    def __call__(self, x, skip, training):
        if tuple(skip.shape[2:]) != tuple(self.out_size):
            raise ValueError(
                f"skip spatial size {skip.shape[2:]} does not match target "
                f"{self.out_size}"
            )
        up_low = dc.bilinear_resize(x[:, : self.cin - self.growth], size=self.out_size)
        up_all = dc.bilinear_resize(x, size=self.out_size)
        pre = dc.leaky_relu(self.norm(dc.concat([up_all, skip], axis=1), training))
        return up_low + self.conv(pre)


class PredictionHead(Module):
    """Batch normalization then a 3x3 convolution to one channel."""

    def __init__(self, rng, channels, dtype):
        self.norm = BatchNorm(channels, dtype)
        self.conv = Conv3x3(rng, channels, 1, dtype)

    def __call__(self, x, training):
        return self.conv(self.norm(x, training))


# -- networks --------------------------------------------------------------


class DepthNet(Module):
    """Encoder-decoder predicting inverse depth at multiple scales."""

    def __init__(self, config: EcnConfig, input_hw, rng):
        self.config = config
        self.plan = plan_layers(config, *input_hw)
        c0, g = config.initial_channels, config.growth_rate
        n = self.plan.num_layers
        self.stem = Conv3x3(rng, config.input_channels, c0, config.dtype)
        self.encoders = [
            EncodeLayer(rng, config, c0 + k * g, self.plan.sizes[k + 1])
            for k in range(n)
        ]
        self.decoders = [
            DecodeLayer(
                rng,
                config,
                c0 + (n - k) * g,
                c0 + (n - k - 1) * g,
                self.plan.sizes[n - k - 1],
            )
            for k in range(n)
        ]
        self.num_scales = min(config.num_pred_scales, n)
        self.heads = [
            PredictionHead(rng, c0 + (self.num_scales - 1 - j) * g, config.dtype)
            for j in range(self.num_scales)
        ]

    def forward(self, x, training=True):
        """Return raw multi-scale prediction maps, coarsest first.

        The finest map has the input's spatial size; each entry is the
        upsampled previous map plus that scale's residue.
        """
        x = dc.as_tensor(x)
        n = self.plan.num_layers
        feats = dc.leaky_relu(self.stem(x))
        skips = [feats]
        for layer in self.encoders:
            feats = layer(feats, training)
            skips.append(feats)
        raws = []
        raw = None
        for k, layer in enumerate(self.decoders):
            feats = layer(feats, skips[n - k - 1], training)
            head_index = k - (n - self.num_scales)
            if head_index >= 0:
                residue = self.heads[head_index](feats, training)
                if raw is None:
                    raw = residue
                else:
                    raw = dc.bilinear_resize(raw, size=self.plan.sizes[n - k - 1]) + residue
                raws.append(raw)
        return raws

    def inverse_depths(self, x, training=True):
        """Positive inverse-depth maps at each scale, coarsest first."""
        maps = [dc.softplus(raw) for raw in self.forward(x, training)]
        if self.config.depth_normalization:
            maps = [
                m * (DEPTH_MEAN_TARGET / dc.tmean(m, axis=(1, 2, 3), keepdims=True))
                for m in maps
            ]
        return maps


class PoseNet(Module):
    """Encoder pooling every feature level into per-neighbor pose vectors."""

    def __init__(self, config: EcnConfig, input_hw, rng):
        self.config = config
        self.plan = plan_layers(config, *input_hw)
        c0, g = config.initial_channels, config.growth_rate
        n = self.plan.num_layers
        self.stem = Conv3x3(rng, config.input_channels, c0, config.dtype)
        self.encoders = [
            EncodeLayer(rng, config, c0 + k * g, self.plan.sizes[k + 1])
            for k in range(n)
        ]
        pooled = sum(c0 + (k + 1) * g for k in range(n))
        self.head = Linear(rng, pooled, len(POSE_OFFSETS) * 6, config.dtype)
        # both scales keep early warps inside the image; raw O(1) rotations
        # would push every sampling grid out of bounds
        self.output_scale = np.concatenate(
            [np.full(3, TRANSLATION_OUTPUT_SCALE), np.full(3, ROTATION_OUTPUT_SCALE)]
        )

    def forward(self, x, training=True):
        """(N, 4, 6) pose vectors for frame offsets -2, -1, +1, +2."""
        x = dc.as_tensor(x)
        if x.shape[1] != self.config.input_channels:
            raise ValueError(
                f"pose net expects {self.config.input_channels} input channels, "
                f"got {x.shape[1]}"
            )
        feats = dc.leaky_relu(self.stem(x))
        pooled = []
        for layer in self.encoders:
            feats = layer(feats, training)
            pooled.append(dc.tmean(feats, axis=(2, 3)))
        out = self.head(dc.concat(pooled, axis=1))
        out = dc.reshape(out, (x.shape[0], len(POSE_OFFSETS), 6))
        return out * Tensor(self.output_scale.astype(x.dtype))

    def features(self, x, training=True):
        """Per-level feature maps, for visualization dumps."""
        feats = dc.leaky_relu(self.stem(dc.as_tensor(x)))
        levels = [feats]
        for layer in self.encoders:
            feats = layer(feats, training)
            levels.append(feats)
        return levels


def build_networks(config: EcnConfig, input_hw, seed=0, pose_slices=5):
    """Standard pairing: depth net on the middle slice, pose net on the stack
    with halved channel settings."""
    rng = np.random.default_rng(seed)
    depth_net = DepthNet(config, input_hw, rng)
    pose_config = EcnConfig(
        encode_scale=config.encode_scale,
        initial_channels=max(1, config.initial_channels // 2),
        growth_rate=max(1, config.growth_rate // 2),
        min_feature_size=config.min_feature_size,
        input_channels=3 * pose_slices,
        norm_kind=config.norm_kind,
        norm_groups=config.norm_groups,
        decorr_iters=config.decorr_iters,
        dtype=config.dtype,
    )
    pose_net = PoseNet(pose_config, input_hw, rng)
    return depth_net, pose_net


def count_params(*nets):
    """Total learned scalars across weights, biases and affine norm terms."""
    return int(sum(p.data.size for net in nets for p in net.params()))
