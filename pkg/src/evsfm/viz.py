"""Rasters for flow, depth and feature maps, in plain PGM/PPM formats."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import FlowField, InverseDepthMap

__all__ = [
    "write_pgm",
    "write_ppm",
    "read_pnm",
    "render_flow_image",
    "render_depth_image",
    "dump_feature_maps",
    "write_trajectory_csv",
]


def write_pgm(gray, path):
    """Binary P5 grayscale, maxval 255; input must be uint8 (H, W)."""
    gray = np.asarray(gray, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode())
        f.write(gray.tobytes())


def write_ppm(rgb, path):
    """Binary P6 color, maxval 255; input must be uint8 (H, W, 3)."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode())
        f.write(rgb.tobytes())


def read_pnm(path):
    with open(path, "rb") as f:
        magic = f.readline().strip()
        dims = f.readline().split()
        f.readline()  # maxval
        w, h = int(dims[0]), int(dims[1])
        data = np.frombuffer(f.read(), dtype=np.uint8)
    if magic == b"P5":
        return data.reshape(h, w)
    if magic == b"P6":
        return data.reshape(h, w, 3)
    raise ValueError(f"unsupported format {magic!r}")


def _hsv_to_rgb(h, s, v):
    """Vectorized HSV -> RGB on arrays in [0, 1]."""
    i = np.floor(h * 6.0).astype(np.int64) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - f * s)
    t = v * (1.0 - (1.0 - f) * s)
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def render_flow_image(flow: FlowField, max_mag=None):
    """Direction as hue, magnitude as saturation; zero flow is white.

    Returns a uint8 (H, W, 3) image.
    """
    mag = flow.magnitude()
    if max_mag is None:
        max_mag = float(mag.max()) or 1.0
    hue = (np.arctan2(flow.v, flow.u) / (2.0 * np.pi)) % 1.0
    sat = np.clip(mag / max_mag, 0.0, 1.0)
    rgb = _hsv_to_rgb(hue, sat, np.ones_like(sat))
    return np.round(rgb * 255.0).astype(np.uint8)


def render_depth_image(inv_depth: InverseDepthMap):
    """Linear stretch of inverse depth to [0, 255], near is bright.

    Returns (uint8 image, (min, max) of the raw values) so callers can write
    the range sidecar.
    """
    values = inv_depth.values
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        scaled = (values - lo) / (hi - lo)
    else:
        scaled = np.zeros_like(values)
    return np.round(scaled * 255.0).astype(np.uint8), (lo, hi)


def _tile_channels(data):
    """Normalize each channel of (C, H, W) and lay them out in one row."""
    c, h, w = data.shape
    tiles = np.zeros((h, c * (w + 1) - 1))
    for i in range(c):
        ch = data[i]
        lo, hi = ch.min(), ch.max()
        tiles[:, i * (w + 1) : i * (w + 1) + w] = (
            (ch - lo) / (hi - lo) if hi > lo else 0.0
        )
    return np.round(tiles * 255.0).astype(np.uint8)


def dump_feature_maps(net, x, directory, training=False):
    """Write one grayscale tile row per feature level of the network.

    Works for both networks: pose nets expose .features(); depth nets are
    traced through their encoder stack.  Returns the written paths.
    """
    from . import diffcore as dc
    from .diffcore import Tensor

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    x = Tensor(np.asarray(x))
    if hasattr(net, "features"):
        # pose net: stem level plus one per encoder; drop the stem so the
        # row count equals the planned layer count
        levels = net.features(x, training=training)[1:]
    else:
        feats = dc.leaky_relu(net.stem(x))
        skips = [feats]
        levels = []
        for layer in net.encoders:
            feats = layer(feats, training)
            skips.append(feats)
            levels.append(feats)
        n = net.plan.num_layers
        for k, layer in enumerate(net.decoders):
            feats = layer(feats, skips[n - k - 1], training)
            levels.append(feats)
    paths = []
    for i, level in enumerate(levels):
        path = directory / f"level_{i:02d}.pgm"
        write_pgm(_tile_channels(level.data[0]), path)
        paths.append(path)
    return paths


def write_trajectory_csv(positions, rotations, dt, path):
    """CSV rows: t, x, y, z, then the rotation matrix in row-major order."""
    with open(path, "w", newline="") as f:
        f.write("t,x,y,z," + ",".join(f"r{i}{j}" for i in range(3) for j in range(3)) + "\n")
        for k, (p, r) in enumerate(zip(positions, rotations)):
            vals = [k * dt, *p, *r.reshape(-1)]
            f.write(",".join(f"{v:.9g}" for v in vals) + "\n")
