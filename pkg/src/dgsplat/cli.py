"""Command-line surface.

Subcommands: gen, train, render, eval, gradcheck, motion-vis, ablate.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

import dgsplat.autodiff as ad
from dgsplat import dataio
from dgsplat.metrics import per_frame_curve
from dgsplat.render import render_motion
from dgsplat.synth import SceneSpec, generate, standard_scene
from dgsplat.train import (
    TrainConfig,
    evaluate,
    inference_render,
    train,
)


def _load_config(args, **overrides) -> TrainConfig:
    base = {}
    if args.config:
        with open(args.config) as f:
            base = json.load(f)
    base.update({k: v for k, v in overrides.items() if v is not None})
    if args.seed is not None:
        base["seed"] = args.seed
    return TrainConfig.from_dict({**TrainConfig().to_dict(), **base})


def _frames_for(args):
    frames, gt = dataio.load_dataset(args.data)
    return frames, gt


def _holdout_split(frames, args):
    if getattr(args, "holdout_every", 0):
        return frames.split_holdout(args.holdout_every, args.holdout_offset)
    return frames, None


def cmd_gen(args) -> int:
    if args.preset == "standard":
        spec = standard_scene()
    else:
        kinds = ["static"] * args.static + ["linear"] * args.linear \
            + ["orbital"] * args.orbital + ["sudden"] * args.sudden
        spec = SceneSpec(kinds=tuple(kinds), seed=args.seed or 0,
                         n_frames=args.frames, image_size=args.size)
    if args.seed is not None:
        spec = SceneSpec(**{**spec.to_dict(), "seed": args.seed,
                            "kinds": tuple(spec.kinds)})
    frames, gt = generate(spec)
    dataio.save_dataset(args.out, frames, gt)
    print(f"wrote {frames.n_frames} frames x {frames.n_cameras} cameras to {args.out}")
    return 0


def cmd_train(args) -> int:
    frames, _ = _frames_for(args)
    train_fs, _ = _holdout_split(frames, args)
    if args.resume:
        state = dataio.load_checkpoint(args.resume)
        config = state.config
        if args.iters:
            raise ValueError("--iters cannot change on resume; it fixes the lr schedule")
    else:
        config = _load_config(
            args,
            iterations=args.iters,
            encoder_enabled=False if args.baseline else None,
            shared_weights=False if args.unshared else None,
            sampling=args.sampling,
        )
        state = None
    state = train(train_fs, config, state=state, stop_at=args.stop_at,
                  log_every=args.log_every)
    dataio.save_checkpoint(state, args.out)
    if args.loss_csv:
        rows = [[i, lc, lt, wt] for i, ((lc, lt), wt)
                in enumerate(zip(state.loss_history, state.wall_times))]
        dataio.write_csv(args.loss_csv, ["step", "loss_c", "loss_t", "wall_time"], rows)
    if state.loss_history:
        tail = np.mean([h[0] for h in state.loss_history[-50:]])
        print(f"trained to step {state.iteration}; tail L_c {tail:.5f}; saved {args.out}")
    else:
        print(f"saved untrained state at step 0 to {args.out}")
    return 0


def cmd_render(args) -> int:
    state = dataio.load_checkpoint(args.ckpt)
    frames, _ = _frames_for(args)
    out = inference_render(state, args.t, frames.cameras[args.cam])
    dataio.save_png(args.out, out.color.data)
    if args.raw:
        dataio.save_raw(args.raw, out.color.data)
    print(f"rendered t={args.t} cam={args.cam} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    state = dataio.load_checkpoint(args.ckpt)
    frames, _ = _frames_for(args)
    if args.holdout_every:
        _, frames = _holdout_split(frames, args)
    report = evaluate(state, frames)
    dataio.write_csv(args.out, ["frame", "timestamp", "psnr", "ssim"],
                     list(report.rows()))
    print(f"mean PSNR {report.mean_psnr:.2f} dB, mean SSIM {report.mean_ssim:.4f} "
          f"over {len(report.psnr)} frames -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from dgsplat.gradcheck import run_gradcheck
    results = run_gradcheck(verbose=True)
    return 0 if all(r.passed for r in results) else 1


def cmd_motion_vis(args) -> int:
    state = dataio.load_checkpoint(args.ckpt)
    frames, _ = _frames_for(args)
    d_pos, _, _ = state.deform.deform(state.gaussians.positions, args.t)
    out = render_motion(state.gaussians.view(), d_pos,
                        frames.cameras[args.cam], state.config.render)
    dataio.save_png(args.out, out.color.data)
    print(f"motion heatmap at t={args.t} -> {args.out}")
    return 0


def cmd_ablate(args) -> int:
    from dgsplat.train import ablate
    frames, _ = _frames_for(args)
    grid = json.loads(args.grid)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    config = _load_config(args, iterations=args.iters)
    header, rows = ablate(frames, grid, config, seeds=seeds,
                          holdout_every=args.holdout_every,
                          holdout_offset=args.holdout_offset)
    dataio.write_csv(args.out, header, rows)
    for row in rows:
        print("  ".join(str(v) for v in row))
    print(f"wrote {len(rows)} rows -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dgsplat",
                                description="deformable Gaussian splatting, desk scale")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--precision", type=int, choices=(32, 64), default=64)
    p.add_argument("--config", default=None, help="JSON file of TrainConfig fields")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--preset", choices=("standard", "custom"), default="standard")
    g.add_argument("--frames", type=int, default=20)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--static", type=int, default=10)
    g.add_argument("--linear", type=int, default=5)
    g.add_argument("--orbital", type=int, default=5)
    g.add_argument("--sudden", type=int, default=0)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--iters", type=int, default=None)
    t.add_argument("--stop-at", type=int, default=None)
    t.add_argument("--resume", default=None)
    t.add_argument("--baseline", action="store_true", help="disable the encoder branch")
    t.add_argument("--unshared", action="store_true", help="untie the two deformation fields")
    t.add_argument("--sampling", choices=("random", "continuous"), default=None)
    t.add_argument("--holdout-every", type=int, default=0)
    t.add_argument("--holdout-offset", type=int, default=2)
    t.add_argument("--loss-csv", default=None)
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", help="render a checkpoint at a timestamp")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True, help="dataset (cameras come from here)")
    r.add_argument("--t", type=float, required=True)
    r.add_argument("--cam", type=int, default=0)
    r.add_argument("--out", required=True)
    r.add_argument("--raw", default=None)
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM per frame")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--holdout-every", type=int, default=0)
    e.add_argument("--holdout-offset", type=int, default=2)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference suite over all modules")
    c.set_defaults(fn=cmd_gradcheck)

    m = sub.add_parser("motion-vis", help="render the |displacement| heatmap")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--t", type=float, required=True)
    m.add_argument("--cam", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(fn=cmd_motion_vis)

    a = sub.add_parser("ablate", help="grid of configs -> holdout metric table")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--grid", required=True,
                   help='JSON, e.g. \'{"shared_weights": [true, false]}\'')
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--iters", type=int, default=None)
    a.add_argument("--holdout-every", type=int, default=5)
    a.add_argument("--holdout-offset", type=int, default=2)
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    ad.set_default_dtype(np.float32 if args.precision == 32 else np.float64)
    try:
        return args.fn(args)
    except Exception as e:  # runtime failure: exit 1, distinct from usage (2)
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
