"""Command-line surface: synth, train, eval, infer, plot, gradcheck, dumpfeat.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
failure.  A flat key=value config file supplies defaults; targeted flags
override it.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import metrics, synth, trainer, viz
from .decorr import decorrelate_features
from .diffcore import Tensor, grad_check
from .ecn import EcnConfig, build_networks, count_params
from .events import FormatError, build_stack, event_pixel_fraction, read_events
from .geometry import (
    FlowField,
    InverseDepthMap,
    Pose,
    integrate_trajectory,
    read_calibration,
)
from .metrics import EvalMask
from .trainer import StackDataset, TrainConfig, infer, load_networks, save_networks

USAGE_ERROR, DATA_ERROR, NUMERIC_ERROR = 1, 2, 3

_CONFIG_KEYS = {
    "seed": int,
    "batch_size": int,
    "epochs": int,
    "steps": int,
    "lr0": float,
    "smoothness_weight": float,
    "slice_dt": float,
    "norm_kind": str,
    "depth_normalization": lambda s: s.lower() in ("1", "true", "yes"),
    "constant_velocity": lambda s: s.lower() in ("1", "true", "yes"),
    "encode_scale": float,
    "initial_channels": int,
    "growth_rate": int,
    "min_feature_size": int,
    "num_pred_scales": int,
    "num_scenes": int,
    "num_slices": int,
    "width": int,
    "height": int,
    "dataset_dir": str,
    "out_dir": str,
    "checkpoint": str,
}

_DEFAULTS = {
    "seed": 0,
    "batch_size": 8,
    "epochs": 30,
    "steps": 0,
    "lr0": 0.01,
    "smoothness_weight": 0.1,
    "slice_dt": 1.0 / 40.0,
    "norm_kind": "batch",
    "depth_normalization": False,
    "constant_velocity": False,
    "encode_scale": 0.5,
    "initial_channels": 8,
    "growth_rate": 8,
    "min_feature_size": 8,
    "num_pred_scales": 3,
    "num_scenes": 4,
    "num_slices": 24,
    "width": 64,
    "height": 64,
    "dataset_dir": "dataset",
    "out_dir": "out",
    "checkpoint": "checkpoint.bin",
}


class RunConfig(dict):
    @classmethod
    def load(cls, path):
        cfg = cls(_DEFAULTS)
        if path is None:
            return cfg
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, sep, value = line.partition("=")
                key, value = key.strip(), value.strip()
                if not sep or key not in _CONFIG_KEYS:
                    raise ValueError(f"unknown config key {key!r} at line {lineno}")
                cfg[key] = _CONFIG_KEYS[key](value)
        return cfg

    def train_config(self):
        return TrainConfig(
            batch_size=self["batch_size"],
            epochs=self["epochs"],
            lr0=self["lr0"],
            smoothness_weight=self["smoothness_weight"],
            slice_dt=self["slice_dt"],
            seed=self["seed"],
            norm_kind=self["norm_kind"],
            depth_normalization=self["depth_normalization"],
            constant_velocity=self["constant_velocity"],
        )

    def ecn_config(self):
        return EcnConfig(
            encode_scale=self["encode_scale"],
            initial_channels=self["initial_channels"],
            growth_rate=self["growth_rate"],
            min_feature_size=self["min_feature_size"],
            norm_kind=self["norm_kind"],
            depth_normalization=self["depth_normalization"],
            num_pred_scales=self["num_pred_scales"],
        )


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(USAGE_ERROR)


def _load_dataset(directory):
    stream, intr, depths, flows, poses = synth.read_dataset(Path(directory))
    return stream, intr, depths, flows, poses


def _build_stacks(stream, slice_dt, num_slices):
    stacks = []
    for start in range(num_slices - 4):
        stacks.append(build_stack(stream, start * slice_dt, slice_dt, 5))
    return stacks


def cmd_synth(cfg, args):
    # synth produces a dataset, so it lands where train will look for one
    out = Path(args.out or cfg["dataset_dir"])
    spec = synth.default_scene_spec(
        seed=cfg["seed"], num_slices=cfg["num_slices"],
        width=cfg["width"], height=cfg["height"],
    )
    scene = synth.generate_scene(spec)
    synth.write_dataset(scene, out)
    print(f"wrote {len(scene.stream)} events and {len(scene.inv_depths)} frames to {out}")
    return 0


def cmd_train(cfg, args):
    stream, intr, _, _, poses = _load_dataset(args.dataset or cfg["dataset_dir"])
    slice_dt = cfg["slice_dt"]
    stacks = _build_stacks(stream, slice_dt, len(poses))
    dataset = StackDataset(stacks)
    out = Path(args.out or cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    steps = cfg["steps"] or None
    depth_net, pose_net, history = trainer.train(
        dataset, intr, cfg.train_config(), ecn_config=cfg.ecn_config(),
        steps=steps, log_path=out / "train_log.csv",
    )
    save_networks(depth_net, pose_net, out / cfg["checkpoint"])
    print(
        f"trained {len(history)} steps, final loss {history[-1][4]:.6f}, "
        f"{count_params(depth_net, pose_net)} parameters"
    )
    return 0


def cmd_eval(cfg, args):
    stream, intr, depths, flows, poses = _load_dataset(args.dataset or cfg["dataset_dir"])
    slice_dt = cfg["slice_dt"]
    stacks = _build_stacks(stream, slice_dt, len(poses))
    out = Path(args.out or cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)

    if args.oracle:
        preds = [
            (depths[i + 2], flows[i + 2], poses[i + 2]) for i in range(len(stacks))
        ]
    else:
        ecn_cfg = cfg.ecn_config()
        h, w = intr.height, intr.width
        depth_net, pose_net = build_networks(ecn_cfg, (h, w), seed=cfg["seed"])
        load_networks(depth_net, pose_net, args.checkpoint or out / cfg["checkpoint"])
        preds = []
        for stack in stacks:
            inv, flow, pose = infer(depth_net, pose_net, stack, intr, slice_dt)
            preds.append((inv, flow, Pose(pose.v * slice_dt, pose.w * slice_dt)))

    fractions = [event_pixel_fraction(s.middle) for s in stacks]
    keep = range(len(stacks))
    if args.erate_filter:
        keep = metrics.erate_filter(fractions)

    rows = []
    aee_list = []
    for i in keep:
        stack = stacks[i]
        inv_p, flow_p, pose_p = preds[i]
        gt_inv, gt_flow = depths[i + 2], flows[i + 2]
        if args.mask == "events":
            mask = EvalMask.from_slice(stack.middle)
        else:
            mask = EvalMask.dense(intr.height, intr.width)
        aee, outliers = metrics.flow_aee(flow_p, gt_flow, mask)
        aee_list.append(aee)
        # median-scale the predicted depth before the depth error suite
        pred_depth = inv_p.depth()
        gt_depth = gt_inv.depth()
        s = np.median(gt_depth[mask.values]) / np.median(pred_depth[mask.values])
        dm = metrics.depth_metrics(pred_depth * s, gt_depth, mask)
        rows.append(
            [i, mask.kind, aee, outliers, dm["AbsRel"], dm["RMSElog"], dm["SILog"],
             dm["delta1"], dm["delta2"], dm["delta3"]]
        )
    pe = metrics.pose_errors(
        [preds[i][2] for i in keep], [poses[i + 2] for i in keep], slice_dt,
        scale_mode=args.scale_mode,
        depth_maps=[preds[i][0] for i in keep] if args.scale_mode == "depth" else None,
        target_road_depth=args.road_depth,
    )
    metrics.write_report_csv(
        rows, out / "eval_report.csv",
        ["frame", "mask", "AEE", "outliers", "AbsRel", "RMSElog", "SILog",
         "delta1", "delta2", "delta3"],
    )
    print(
        f"frames={len(rows)} mean_AEE={np.mean(aee_list):.6f} "
        f"ARPE={pe['ARPE']:.4f} ARRE={pe['ARRE']:.6f} AEE_tr={pe['AEE_tr']:.6f}"
    )
    return 0


def cmd_infer(cfg, args):
    stream, intr, _, _, poses = _load_dataset(args.dataset or cfg["dataset_dir"])
    slice_dt = cfg["slice_dt"]
    stacks = _build_stacks(stream, slice_dt, len(poses))
    stack = stacks[args.index]
    depth_net, pose_net = build_networks(
        cfg.ecn_config(), (intr.height, intr.width), seed=cfg["seed"]
    )
    out = Path(args.out or cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    load_networks(depth_net, pose_net, args.checkpoint or out / cfg["checkpoint"])
    inv, flow, pose = infer(depth_net, pose_net, stack, intr, slice_dt)
    dc.write_tensor_file(inv.values, out / "inferred_depth.ten")
    dc.write_tensor_file(np.stack([flow.u, flow.v]), out / "inferred_flow.ten")
    print("pose v=", pose.v, "w=", pose.w)
    return 0


def cmd_plot(cfg, args):
    out = Path(args.out or cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    dataset = Path(args.dataset or cfg["dataset_dir"])
    _, intr, depths, flows, poses = _load_dataset(dataset)
    for i, (inv, flow) in enumerate(zip(depths, flows)):
        img, (lo, hi) = viz.render_depth_image(inv)
        viz.write_pgm(img, out / f"depth_{i:05d}.pgm")
        with open(out / f"depth_{i:05d}.txt", "w") as f:
            f.write(f"min={lo:.9g}\nmax={hi:.9g}\n")
        viz.write_ppm(viz.render_flow_image(flow), out / f"flow_{i:05d}.ppm")
    positions, rotations = integrate_trajectory(poses, cfg["slice_dt"])
    viz.write_trajectory_csv(positions, rotations, cfg["slice_dt"], out / "trajectory.csv")
    print(f"wrote {len(depths)} frame renders and the trajectory to {out}")
    return 0


def cmd_gradcheck(cfg, args):
    rng = np.random.default_rng(cfg["seed"])
    checks = {
        "conv2d": (
            lambda x, w, b: dc.tsum(dc.conv2d(x, w, b) ** 2.0),
            [rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)),
             rng.normal(size=3)],
        ),
        "bilinear_resize": (
            lambda x: dc.tsum(dc.bilinear_resize(x, scale=2.0) ** 2.0),
            [rng.normal(size=(1, 1, 4, 4))],
        ),
        "bilinear_sample": (
            lambda x, g: dc.tsum(dc.bilinear_sample(x, g) ** 2.0),
            [rng.normal(size=(1, 1, 4, 4)), rng.uniform(0.2, 2.8, size=(1, 3, 3, 2))],
        ),
        "decorrelate": (
            lambda x: dc.tsum(decorrelate_features(x, groups=2, iters=3)[0] ** 2.0),
            [rng.normal(size=(1, 4, 2, 2))],
        ),
    }
    worst = 0.0
    for name, (op, inputs) in checks.items():
        err = grad_check(op, [Tensor(np.asarray(v, dtype=np.float64)) for v in inputs])
        tol = 1e-3 if name == "decorrelate" else 1e-4
        status = "ok" if err < tol else "FAIL"
        print(f"{name}: max relative error {err:.3e} [{status}]")
        if err >= tol:
            worst = max(worst, err)
    return 0 if worst == 0.0 else NUMERIC_ERROR


def cmd_dumpfeat(cfg, args):
    out = Path(args.out or cfg["out_dir"])
    ecn_cfg = cfg.ecn_config()
    h, w = cfg["height"], cfg["width"]
    depth_net, pose_net = build_networks(ecn_cfg, (h, w), seed=cfg["seed"])
    if args.checkpoint:
        load_networks(depth_net, pose_net, args.checkpoint)
    rng = np.random.default_rng(cfg["seed"])
    x = rng.uniform(0, 1, size=(1, 3, h, w)).astype(np.float32)
    paths = viz.dump_feature_maps(depth_net, x, out / "depth_features")
    xs = rng.uniform(0, 1, size=(1, 15, h, w)).astype(np.float32)
    paths += viz.dump_feature_maps(pose_net, xs, out / "pose_features")
    print(f"wrote {len(paths)} feature tiles under {out}")
    return 0


def main(argv=None):
    parser = _Parser(prog="evsfm")
    parser.add_argument("--config", default=None, help="key=value config file")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("synth", "train", "eval", "infer", "plot", "gradcheck", "dumpfeat"):
        p = sub.add_parser(name)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--dataset", default=None)
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--norm", choices=("batch", "group", "decorr"), default=None)
        if name == "eval":
            p.add_argument("--mask", choices=("dense", "events"), default="dense")
            p.add_argument("--scale-mode", choices=("gt", "depth"), default="gt",
                           dest="scale_mode")
            p.add_argument("--erate-filter", action="store_true", dest="erate_filter")
            p.add_argument("--oracle", action="store_true")
            p.add_argument("--road-depth", type=float, default=5.0, dest="road_depth")
        if name == "infer":
            p.add_argument("--index", type=int, default=0)

    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.norm is not None:
            cfg["norm_kind"] = {"decorr": "decorrelate"}.get(args.norm, args.norm)
        handler = {
            "synth": cmd_synth,
            "train": cmd_train,
            "eval": cmd_eval,
            "infer": cmd_infer,
            "plot": cmd_plot,
            "gradcheck": cmd_gradcheck,
            "dumpfeat": cmd_dumpfeat,
        }[args.command]
        return handler(cfg, args)
    except (FormatError, FileNotFoundError, ValueError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return DATA_ERROR
    except RuntimeError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return NUMERIC_ERROR


if __name__ == "__main__":
    sys.exit(main())
