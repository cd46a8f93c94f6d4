"""``cif`` command-line entry point.

Exit codes: 0 success, 2 bad input (arguments, files, data), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data
from .core import load_checkpoint, save_checkpoint, ModelState
from .errors import DataError, InputError, NumericError, UsageError
from .metrics import panoptic_map
from .splat import Camera, psnr, render, set_threads
from .train import TrainConfig, TrainLog, evaluate_state, fit

DEFAULTS = TrainConfig()


def _add_train(sub):
    p = sub.add_parser("train", help="optimise a model on a scene",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--stage", choices=("recon", "instance", "full"), default="full", help="stages to run")
    p.add_argument("--iters-recon", type=int, default=DEFAULTS.iters_recon, help="photometric iterations")
    p.add_argument("--iters-inst", type=int, default=DEFAULTS.iters_inst, help="instance iterations")
    p.add_argument("--lambda-inst", type=float, default=DEFAULTS.lambda_inst, help="instance loss weight")
    p.add_argument("--resample-rate", type=float, default=DEFAULTS.resample_rate, help="fraction of Gaussians resampled per round")
    p.add_argument("--resample-every", type=int, default=DEFAULTS.resample_every, help="instance iterations between rounds")
    p.add_argument("--num-gaussians", type=int, default=DEFAULTS.num_gaussians, help="Gaussians at initialisation")
    p.add_argument("--seed", type=int, default=DEFAULTS.seed, help="RNG seed")
    p.add_argument("--no-calibration", action="store_true", help="freeze calibration factors at 1")
    p.add_argument("--no-resample", action="store_true", help="disable resampling rounds")
    p.add_argument("--shuffle", action="store_true", help="seeded shuffled frame order instead of round-robin")
    p.add_argument("--init-ckpt", default=None, help="start from this checkpoint instead of a fresh init")
    p.add_argument("--config", default=None, help="JSON file of TrainConfig overrides (flags win)")
    p.add_argument("--resample-log", default=None, help="write resampling pairs here")
    p.add_argument("--log", default=None, help="write the iter/L_rgb/L_inst/PSNR log here")
    p.set_defaults(func=cmd_train)


def _add_render(sub):
    p = sub.add_parser("render", help="render colour and panoptic labels",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--frame", type=int, default=0, help="frame supplying camera and time")
    p.add_argument("--time", type=float, default=None, help="override the frame time")
    p.add_argument("--camera", type=int, default=None, help="override the camera index")
    p.add_argument("--pose", default=None, metavar="E00,...,E23",
                   help="12 comma-separated values: row-major 3x4 world-to-camera extrinsics "
                        "(intrinsics of the chosen camera)")
    p.add_argument("--out-rgb", required=True, help="colour PPM path")
    p.add_argument("--out-panoptic", required=True, help="label PGM path")
    p.add_argument("--out-marginals", default=None, help="directory for per-instance marginal PGMs")
    p.set_defaults(func=cmd_render)


def _add_eval(sub):
    p = sub.add_parser("eval", help="segmentation metrics on a split",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--split", choices=("train", "test", "all"), default="test", help="frames to score")
    p.add_argument("--out", required=True, help="key=value report path")
    p.set_defaults(func=cmd_eval)


def _add_synth(sub):
    p = sub.add_parser("synth", help="write a synthetic scene",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--preset", required=True, help=f"one of {', '.join(sorted(data.PRESETS))}")
    p.add_argument("--out", required=True, help="scene directory to write")
    p.add_argument("--seed", type=int, default=0, help="RNG seed")
    p.add_argument("--gt-ckpt", default=None, help="also save the ground-truth model here")
    p.set_defaults(func=cmd_synth)


def _add_merge(sub):
    p = sub.add_parser("merge-views", help="merge per-view scenes into one sequence",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--in", dest="inputs", nargs="+", required=True, help="per-view scene directories, in adjacency order")
    p.add_argument("--out", required=True, help="merged scene directory")
    p.set_defaults(func=cmd_merge_views)


def _add_inspect(sub):
    p = sub.add_parser("inspect", help="summarise a checkpoint or scene",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--ckpt", default=None, help="checkpoint to summarise")
    p.add_argument("--scene", default=None, help="scene to summarise")
    p.set_defaults(func=cmd_inspect)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cif", description=__doc__.splitlines()[0],
                                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (_add_train, _add_render, _add_eval, _add_synth, _add_merge, _add_inspect):
        add(sub)
    return parser


def _config_from_args(args) -> TrainConfig:
    values = {}
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(values) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
    explicit = {
        "iters_recon": args.iters_recon, "iters_inst": args.iters_inst,
        "lambda_inst": args.lambda_inst, "resample_rate": args.resample_rate,
        "resample_every": args.resample_every, "num_gaussians": args.num_gaussians,
        "seed": args.seed,
    }
    for key, val in explicit.items():
        if key not in values or val != getattr(DEFAULTS, key):
            values[key] = val
    if args.no_calibration:
        values["calibrate"] = False
    if args.no_resample:
        values["resample"] = False
    if args.shuffle:
        values["shuffle"] = True
    return TrainConfig(**values)


def cmd_train(args) -> int:
    config = _config_from_args(args)
    scene = data.load_scene(args.scene)
    state = load_checkpoint(args.init_ckpt) if args.init_ckpt else None
    if state is not None and state.gaussians.k != scene.k:
        raise DataError(f"checkpoint has K={state.gaussians.k} but scene has K={scene.k}")
    if args.stage == "instance" and state is None:
        print("warning: instance stage without --init-ckpt starts from an untrained model", file=sys.stderr)
    train_log = TrainLog()
    resample_log = open(args.resample_log, "w") if args.resample_log else None
    try:
        state = fit(scene, config, args.stage, state, train_log, resample_log)
    finally:
        if resample_log is not None:
            resample_log.close()
    save_checkpoint(args.out, state)
    if args.log:
        Path(args.log).write_text("\n".join(train_log.lines()) + "\n")
    for line in train_log.lines():
        print(line)
    if scene.test_indices:
        value, report = evaluate_state(state, scene, scene.test_indices)
        print(f"test PSNR={value:.4f} mIoU={report.miou:.6f}")
    return 0


def _load_compatible(args):
    state = load_checkpoint(args.ckpt)
    scene = data.load_scene(args.scene)
    if state.gaussians.k != scene.k:
        raise DataError(f"checkpoint has K={state.gaussians.k} but scene has K={scene.k}")
    return state, scene


def cmd_render(args) -> int:
    state, scene = _load_compatible(args)
    if not 0 <= args.frame < len(scene.frames):
        raise UsageError(f"frame {args.frame} outside 0..{len(scene.frames) - 1}")
    frame = scene.frames[args.frame]
    cam_index = frame.camera if args.camera is None else args.camera
    if not 0 <= cam_index < len(scene.cameras):
        raise UsageError(f"camera {cam_index} outside 0..{len(scene.cameras) - 1}")
    camera = scene.cameras[cam_index]
    if args.pose is not None:
        try:
            ext = np.array([float(v) for v in args.pose.split(",")]).reshape(3, 4)
        except ValueError:
            raise UsageError("--pose needs 12 comma-separated numbers") from None
        camera = Camera(camera.fx, camera.fy, camera.cx, camera.cy, ext[:, :3], ext[:, 3],
                        camera.width, camera.height)
    t = frame.time if args.time is None else args.time
    if not 0.0 <= t <= 1.0:
        raise UsageError(f"time {t} outside [0, 1]")
    buf = render(state.gaussians, state.deform, camera, t)
    data.write_image_ppm(args.out_rgb, buf.color)
    data.write_mask_pgm(args.out_panoptic, panoptic_map(buf))
    if args.out_marginals:
        out = Path(args.out_marginals)
        out.mkdir(parents=True, exist_ok=True)
        quant = np.round(255.0 * buf.marginals).astype(np.int64)
        for k in range(state.gaussians.k):
            data.write_mask_pgm(out / f"instance_{k + 1:03d}.pgm", quant[..., k])
    if args.time is None and args.camera is None and args.pose is None:
        print(f"PSNR={psnr(buf.color, frame.image):.4f}")
    return 0


def cmd_eval(args) -> int:
    state, scene = _load_compatible(args)
    indices = scene.split_indices(args.split)
    if not indices:
        raise UsageError(f"split {args.split!r} is empty")
    value, report = evaluate_state(state, scene, indices)
    Path(args.out).write_text(report.to_text() + f"psnr={value:.10f}\n")
    print(report.table())
    print(f"mAcc-pix={report.macc_pix:.6f} mAcc-inst={report.macc_inst:.6f} mIoU={report.miou:.6f}")
    return 0


def cmd_synth(args) -> int:
    spec = data.preset(args.preset)
    result = data.synth_scene(spec, np.random.default_rng(args.seed))
    data.write_scene(result.scene, args.out)
    if args.gt_ckpt:
        rng = np.random.Generator(np.random.PCG64(args.seed))
        save_checkpoint(args.gt_ckpt, ModelState(result.gaussians, result.deform, 0, rng))
    print(f"wrote {len(result.scene.frames)} frames, K={result.scene.k} to {args.out}")
    return 0


def cmd_merge_views(args) -> int:
    scenes = [data.load_scene(d) for d in args.inputs]
    merged = data.merge_scenes(scenes)
    data.write_scene(merged, args.out)
    kept = merged.meta.get("kept_labels", [])
    print(f"wrote {len(merged.frames)} frames, kept instances {kept} as 1..{len(kept)}")
    return 0


def cmd_inspect(args) -> int:
    if not args.ckpt and not args.scene:
        raise UsageError("inspect needs --ckpt and/or --scene")
    if args.ckpt:
        st = load_checkpoint(args.ckpt)
        g = st.gaussians
        print(f"gaussians={g.n} instances={g.k} iteration={st.iteration}")
        print(f"deform_layers={st.deform.layer_dims} freq_pos={st.deform.n_freq_pos} "
              f"freq_time={st.deform.n_freq_time}")
        if g.n:
            print(f"opacity mean={g.opacity.mean():.4f} occupancy mean={g.occupancy.mean():.4f}")
            counts = np.bincount(np.argmax(g.base_identity, axis=1), minlength=g.k)
            print("dominant identity counts=" + ",".join(str(c) for c in counts))
    if args.scene:
        sc = data.load_scene(args.scene)
        print(f"frames={len(sc.frames)} cameras={len(sc.cameras)} K={sc.k} "
              f"train={len(sc.train_indices)} test={len(sc.test_indices)}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    set_threads()
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
