"""Command-line surface tying data generation, training and evaluation
into reproducible experiments. One binary, subcommand per stage; any
contract violation exits nonzero with the error on stderr.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import checkpoint as ckpt_io
from .data import (
    Dataset,
    generate_dataset,
    load_dataset,
    read_intrinsics,
    read_pose,
    write_png,
    _load_instance,
)
from .field import (
    InstanceCode,
    ModelConfig,
    field_evaluator,
    gated_densities,
    moe_densities,
    GatedMoeModel,
)
from .metrics import evaluate, probe_continuity, render_decomposition
from .rendering import Camera, RenderConfig, render_image
from .training import Checkpoint, TemperatureSchedule, TrainConfig, train, \
    optimize_latents


def _find_intrinsics(start_path, explicit=None):
    if explicit:
        return read_intrinsics(explicit)
    path = os.path.abspath(start_path)
    if os.path.isfile(path):
        path = os.path.dirname(path)
    while True:
        candidate = os.path.join(path, "intrinsics.txt")
        if os.path.isfile(candidate):
            return read_intrinsics(candidate)
        parent = os.path.dirname(path)
        if parent == path:
            raise ValueError(
                f"no intrinsics.txt found above {start_path}; pass --intrinsics"
            )
        path = parent


def _camera_from_pose(pose_path, intrinsics):
    focal, cx, cy, width, height = intrinsics
    return Camera(read_pose(pose_path), focal, width, height, cx, cy)


def _resolve_code(checkpoint, instance=None, code_file=None):
    if code_file:
        header, arrays = ckpt_io.load_arrays(code_file)
        if header.get("kind") != "instance-code":
            raise ValueError(f"{code_file}: not an instance-code file")
        return InstanceCode(
            arrays["shape"], arrays["texture"], header.get("instance_id", "")
        )
    if instance:
        if instance not in checkpoint.codes:
            raise KeyError(
                f"instance {instance!r} not in checkpoint "
                f"(has: {sorted(checkpoint.codes)})"
            )
        return checkpoint.codes[instance]
    return checkpoint.mean_code()


def cmd_gen_data(args):
    generate_dataset(
        args.out, n_train=args.instances, n_test=args.test_instances,
        n_views=args.views, resolution=args.res, seed=args.seed,
        n_samples=args.samples,
    )
    print(f"wrote dataset to {args.out}")
    return 0


def cmd_train(args):
    dataset = load_dataset(args.data)
    if args.model_config:
        model_config = ModelConfig.load(args.model_config)
    else:
        model_config = ModelConfig()
    if args.experts:
        model_config.n_experts = args.experts
    config = TrainConfig(
        iterations=args.iters,
        batch_rays=args.batch,
        n_samples=args.samples,
        seed=args.seed,
        lr_model=args.lr,
        lr_codes=args.lr_codes,
        schedule=TemperatureSchedule(args.tau_max, args.tau_min, args.tmax_frac),
        baseline=args.baseline == "foresight",
        metrics_path=args.metrics or f"{args.out}.metrics.csv",
        log_every=args.log_every,
    )
    ckpt = train(dataset, config, model_config)
    ckpt.save(args.out)
    print(f"trained {ckpt.kind} model ({ckpt.model.n_params()} params) "
          f"for {args.iters} iterations -> {args.out}")
    return 0


def cmd_render(args):
    ckpt = Checkpoint.load(args.ckpt)
    code = _resolve_code(ckpt, args.instance, args.code)
    camera = _camera_from_pose(
        args.pose, _find_intrinsics(args.pose, args.intrinsics)
    )
    config = RenderConfig(
        n_samples=args.samples or ckpt.train_config.n_samples,
        white_background=ckpt.train_config.white_background,
    )
    image = render_image(
        field_evaluator(ckpt.model, code), camera, config,
        near=ckpt.train_config.near, far=ckpt.train_config.far,
    )
    write_png(args.out, image)
    print(f"rendered {args.out}")
    return 0


def cmd_optimize(args):
    ckpt = Checkpoint.load(args.ckpt)
    intrinsics = _find_intrinsics(args.images, args.intrinsics)
    inst = _load_instance(args.images, os.path.basename(args.images.rstrip("/")),
                          "observed", intrinsics)
    views = list(zip(inst.images, inst.cameras))
    code = optimize_latents(
        ckpt, views, iterations=args.iters, lr=args.lr, seed=args.seed,
        instance_id=inst.instance_id,
    )
    ckpt_io.save_arrays(
        args.out,
        {"kind": "instance-code", "instance_id": code.instance_id},
        {"shape": code.shape, "texture": code.texture},
    )
    print(f"optimized code for {code.instance_id!r} -> {args.out}")
    return 0


def cmd_eval(args):
    ckpt = Checkpoint.load(args.ckpt)
    dataset = load_dataset(args.data)
    report = evaluate(
        ckpt, dataset, split=args.split, input_views=args.input_views,
        tto_iterations=args.tto_iters, tto_lr=args.tto_lr, seed=args.seed,
    )
    report.write_csv(args.report)
    print(f"mean PSNR {report.mean_psnr:.3f} dB, mean SSIM "
          f"{report.mean_ssim:.4f} over {report.n_views} views "
          f"-> {args.report}")
    return 0


def cmd_decompose(args):
    ckpt = Checkpoint.load(args.ckpt)
    code = _resolve_code(ckpt, args.instance, args.code)
    camera = _camera_from_pose(
        args.pose, _find_intrinsics(args.pose, args.intrinsics)
    )
    config = RenderConfig(
        n_samples=args.samples or ckpt.train_config.n_samples,
        white_background=ckpt.train_config.white_background,
    )
    result = render_decomposition(
        ckpt.model, code, camera, config,
        near=ckpt.train_config.near, far=ckpt.train_config.far,
    )
    os.makedirs(args.out, exist_ok=True)
    for k in range(result.images.shape[0]):
        write_png(os.path.join(args.out, f"expert_{k:02d}.png"),
                  result.images[k])
    stats = {
        "foreground_share": [float(v) for v in result.foreground_share],
        "opacity_partition_residual": float(
            np.abs(result.expert_opacity.sum(axis=0) - result.opacity).max()
        ),
    }
    with open(os.path.join(args.out, "stats.json"), "w") as fh:
        json.dump(stats, fh, indent=2)
    print(f"wrote {result.images.shape[0]} expert renders to {args.out}")
    return 0


def cmd_probe(args):
    ckpt = Checkpoint.load(args.ckpt)
    code = _resolve_code(ckpt, args.instance, args.code)
    try:
        start_s, end_s = args.segment.split(":")
        start = [float(v) for v in start_s.split(",")]
        end = [float(v) for v in end_s.split(",")]
        if len(start) != 3 or len(end) != 3:
            raise ValueError
    except ValueError:
        raise ValueError(
            f"bad --segment {args.segment!r}; expected x0,y0,z0:x1,y1,z1"
        ) from None
    steps = [float(v) for v in args.steps.split(",")]
    model = ckpt.model
    if isinstance(model, GatedMoeModel):
        density_fn = lambda pts: gated_densities(pts, code, model)
    else:
        density_fn = lambda pts: moe_densities(pts, code, model)
    report = probe_continuity(density_fn, start, end, steps)
    with open(args.report, "w") as fh:
        json.dump(report.as_dict(), fh, indent=2)
    print(f"verdict: {report.verdict} (max jumps "
          f"{[f'{j:.3g}' for j in report.max_jumps]}) -> {args.report}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gumbel-nerf",
        description="Mixture-of-experts radiance field experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the procedural toy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--instances", type=int, default=8)
    p.add_argument("--test-instances", type=int, default=2)
    p.add_argument("--views", type=int, default=20)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=192,
                   help="depth samples per ray for ground-truth rendering")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--experts", type=int, default=None)
    p.add_argument("--iters", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--baseline", choices=["foresight"], default=None,
                   help="train the foresight-gated baseline instead")
    p.add_argument("--tau-max", type=float, default=10.0)
    p.add_argument("--tau-min", type=float, default=0.5)
    p.add_argument("--tmax-frac", type=float, default=0.2)
    p.add_argument("--batch", type=int, default=512)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--lr", type=float, default=1.3e-3)
    p.add_argument("--lr-codes", type=float, default=1.3e-3)
    p.add_argument("--metrics", default=None)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--model-config", default=None,
                   help="model config text file (key = value lines)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("render", help="render one view from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--instance", default=None)
    p.add_argument("--code", default=None, help="instance-code file")
    p.add_argument("--pose", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--intrinsics", default=None)
    p.add_argument("--samples", type=int, default=None)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("optimize",
                       help="fit codes for an unseen instance's views")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True,
                   help="instance directory with rgb/ and pose/")
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--lr", type=float, default=2e-2)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--intrinsics", default=None)
    p.set_defaults(fn=cmd_optimize)

    p = sub.add_parser("eval", help="held-out evaluation with per-view CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--input-views", type=int, default=1)
    p.add_argument("--report", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--tto-iters", type=int, default=200)
    p.add_argument("--tto-lr", type=float, default=2e-2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("decompose", help="per-expert decomposition renders")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--instance", default=None)
    p.add_argument("--code", default=None)
    p.add_argument("--pose", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--intrinsics", default=None)
    p.add_argument("--samples", type=int, default=None)
    p.set_defaults(fn=cmd_decompose)

    p = sub.add_parser("probe", help="density continuity probe along a segment")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--segment", required=True, help="x0,y0,z0:x1,y1,z1")
    p.add_argument("--steps", required=True, help="comma-separated step sizes")
    p.add_argument("--report", required=True)
    p.add_argument("--instance", default=None)
    p.add_argument("--code", default=None)
    p.set_defaults(fn=cmd_probe)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
