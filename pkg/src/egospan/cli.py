"""Command line front end: synthesis, training, evaluation, inference.

Subcommands:
    synth   generate a labeled synthetic dataset directory
    train   fit segmentation, pose, or refinement weights on a dataset
    eval    score saved weights against labels, next to constant baselines
    infer   per-frame predictions as CSV, optional figures and world track

Exit codes: 0 success, 2 configuration error (bad flags, bad settings),
3 data error (missing or malformed files), 4 numerical failure
(divergence, failed gradient preflight, failed smoke bound). The
EGOSPAN_THREADS environment variable caps worker counts everywhere;
`--deterministic` forces single-worker execution so reruns with the
same seed are byte-identical.

Dataset directory layout
------------------------
Every format is plain text or flat binary so any language can read it
back with nothing beyond file IO. A dataset directory holds:

    root/
      manifest.json
      seq_000_<motion>/
        mask_00000.pgm          one per frame
        input_00000.ppm         one per frame, only when render="full"
        labels.bin
        labels.index
        mhi.bin
        mhi.index
      seq_001_<motion>/
        ...

manifest.json is JSON with sorted keys, two-space indent, and fields:
format ("egospan dataset v1"), seed, fps, render ("full" or "mask"),
radius_scale, intrinsics {width, height, fov, focal, cx, cy},
history_rows, history_cols, label_record, label_layout (list of
[name, size] pairs), sequences (list of {name, motion, seed, frames}),
total_frames. Sequence i is generated with seed + 104729 * i.

mask_*.pgm is binary PGM (magic P5, maxval 255); foreground pixels are
255, background 0. input_*.ppm is binary PPM (magic P6, maxval 255),
8-bit RGB quantized from the renderer's [0, 1] floats by
round(value * 255).

labels.bin is frames x 116 little-endian float64 ("<f8") records with
no header or padding. One record per frame, fields in order:

    time            1   seconds since sequence start
    body           45   normalized body keypoints, row-major (15, 3)
    head_local_f    3   facing direction, normalized body frame
    head_local_u    3   up direction, normalized body frame
    head_world_f    3   facing direction, world frame
    head_world_u    3   up direction, world frame
    cam_rotation    9   world-from-camera rotation, row-major (3, 3)
    cam_position    3   camera origin, world frame
    norm_scale      1   world-to-normalized similarity scale
    body_world     45   world-frame body keypoints, row-major (15, 3)

labels.index is an ASCII description of that record: a first line
"egospan dataset v1 labels", then "frames N", "record 116", one
"field <name> <offset> <size>" line per field, and a final "end" line.

mhi.bin is frames x 64 x 13 little-endian float64, one motion history
per frame, newest row last. mhi.index mirrors the labels index with
lines "frames N", "rows 64", "cols 13", and "end".

Writing is deterministic: the same seed and settings produce a
byte-identical tree whatever the worker count, so reruns can be
compared with a plain directory hash.
"""

import argparse
import math
import os
import sys

import numpy as np

from .camera import CameraPose, FisheyeIntrinsics, HeadPose
from .config import NetConfig, TrainConfig, apply_settings
from .dataset import (dataset_digest, load_dataset, stack_sequences,
                      write_dataset, write_ppm)
from .estimators import (SMOKE_STEPS, SMOKE_TARGET, ShapeNetSegmenter,
                         Stage1PoseEstimator, Stage2Refiner, run_smoke)
from .evaluate import (baseline_pose, build_report, head_angle_error,
                       keypoint_error, reposition_global)
from .exceptions import ConfigError, DataError, NumericalError, ParseError
from .motions import procedural_motions
from .skeleton import KEYPOINT_NAMES, SKELETON_EDGES

POSE_COLUMNS = tuple(f"{name}_{axis}" for name in KEYPOINT_NAMES
                     for axis in "xyz")
HEAD_COLUMNS = ("facing_x", "facing_y", "facing_z",
                "up_x", "up_y", "up_z")

FIGURE_SIZE = 256
FIGURE_METERS = 2.6
ARROW_LENGTH = 0.3

BONE_COLOR = (0.1, 0.1, 0.1)
JOINT_COLOR = (0.25, 0.25, 0.25)
FACING_COLOR = (0.85, 0.1, 0.1)
UP_COLOR = (0.1, 0.2, 0.85)


def _draw_line(img, r0, c0, r1, c1, color):
    """Rasterize a line segment, skipping out-of-bounds pixels."""
    steps = int(max(abs(r1 - r0), abs(c1 - c0))) + 1
    rows = np.rint(np.linspace(r0, r1, steps)).astype(int)
    cols = np.rint(np.linspace(c0, c1, steps)).astype(int)
    keep = ((rows >= 0) & (rows < img.shape[0])
            & (cols >= 0) & (cols < img.shape[1]))
    img[rows[keep], cols[keep]] = color


def _draw_dot(img, r, c, color, radius=1):
    r, c = int(round(r)), int(round(c))
    lo_r = max(0, r - radius)
    hi_r = min(img.shape[0], r + radius + 1)
    lo_c = max(0, c - radius)
    hi_c = min(img.shape[1], c + radius + 1)
    if lo_r < hi_r and lo_c < hi_c:
        img[lo_r:hi_r, lo_c:hi_c] = color


def render_pose_figure(body, f, u, size=FIGURE_SIZE):
    """Front-view figure of a normalized pose as an (size, size, 3)
    float image in [0, 1].

    Uses an orthographic projection onto the x-y plane: x runs right,
    y runs up, depth is ignored. Bones are dark lines, joints dots, and
    the head facing and up directions are drawn as a red and a blue
    arrow from the head keypoint.
    """
    kp = np.asarray(body, dtype=np.float64).reshape(len(KEYPOINT_NAMES), 3)
    img = np.ones((size, size, 3))
    scale = size / FIGURE_METERS
    mid = kp[:, :2].mean(axis=0)

    def to_px(point):
        col = size / 2.0 + (point[0] - mid[0]) * scale
        row = size / 2.0 - (point[1] - mid[1]) * scale
        return row, col

    for a, b in SKELETON_EDGES:
        _draw_line(img, *to_px(kp[a]), *to_px(kp[b]), BONE_COLOR)
    for point in kp:
        _draw_dot(img, *to_px(point), JOINT_COLOR)
    head = kp[KEYPOINT_NAMES.index("head")]
    for vec, color in ((f, FACING_COLOR), (u, UP_COLOR)):
        vec = np.asarray(vec, dtype=np.float64)
        norm = float(np.linalg.norm(vec))
        if norm > 1e-9:
            tip = head + vec / norm * ARROW_LENGTH
            _draw_line(img, *to_px(head), *to_px(tip), color)
    return img


def _split_pairs(items):
    pairs = []
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def _train_config(args):
    """TrainConfig from explicit flags plus --train key=value pairs."""
    pairs = []
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"),
                      ("seed", "seed"), ("lr", "learning_rate"),
                      ("lr_decay", "lr_decay"), ("alpha", "alpha"),
                      ("beta", "beta"), ("gamma", "gamma"),
                      ("optimizer", "optimizer"),
                      ("volume_side", "volume_side")):
        value = getattr(args, flag)
        if value is not None:
            pairs.append((key, str(value)))
    if args.no_preflight:
        pairs.append(("preflight", "false"))
    pairs.extend(_split_pairs(args.train))
    return apply_settings(TrainConfig(), pairs)


def _net_config(args):
    return apply_settings(NetConfig(), _split_pairs(args.net))


def _apply_determinism(args):
    if getattr(args, "deterministic", False):
        os.environ["EGOSPAN_THREADS"] = "1"


def _write_csv(path, header, rows):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def _fmt(value):
    return repr(float(value))


def cmd_synth(args):
    _apply_determinism(args)
    motions = [m.strip() for m in args.motions.split(",") if m.strip()]
    if not motions:
        raise ConfigError("--motions needs at least one motion name")
    known = procedural_motions()
    for name in motions:
        if name not in known:
            raise ConfigError(f"unknown motion {name!r} (options:"
                              f" {', '.join(sorted(known))})")
    fov = math.pi if args.fov is None else math.radians(args.fov)
    intrinsics = FisheyeIntrinsics.make(args.size, args.size, fov)
    manifest = write_dataset(
        args.out, motions, frames=args.frames, seed=args.seed, fps=args.fps,
        render=args.render, intrinsics=intrinsics,
        radius_scale=args.radius_scale, workers=args.workers)
    print(f"wrote {len(manifest['sequences'])} sequences,"
          f" {manifest['total_frames']} frames to {args.out}")
    print(f"digest {dataset_digest(args.out)}")
    return 0


def _train_smoke(args):
    if args.stage != "stage1":
        raise ConfigError("--smoke always trains stage1")
    if args.data is not None:
        print("smoke mode synthesizes its own fixture; ignoring --data")
    if args.seed is not None:
        print("smoke mode pins every seed; ignoring --seed")
    log_path = args.log or args.out + ".loss.csv"
    est, pose = run_smoke(log_path=log_path)
    est.save(args.out)
    print(f"smoke: pose loss {pose!r} after {SMOKE_STEPS} steps"
          f" (bound {SMOKE_TARGET})")
    print(f"saved stage1 weights to {args.out}")
    if not pose < SMOKE_TARGET:
        raise NumericalError(
            f"smoke training missed the overfit bound: {pose!r} >="
            f" {SMOKE_TARGET}")
    print("smoke: ok")
    return 0


def cmd_train(args):
    _apply_determinism(args)
    if args.smoke:
        return _train_smoke(args)
    if args.data is None:
        raise ConfigError("train needs --data (or --smoke)")
    if args.stage == "stage2" and not args.stage1_weights:
        raise ConfigError("--stage stage2 needs --stage1-weights")
    cfg = _train_config(args)
    net_cfg = _net_config(args)
    log_path = args.log or args.out + ".loss.csv"
    ds = load_dataset(args.data)
    arrays = stack_sequences(ds.sequences)

    if args.stage == "shape":
        if "images" not in arrays:
            raise DataError(
                f"{args.data} has no input images; synthesize with"
                " --render full to train segmentation")
        est = ShapeNetSegmenter(net_config=net_cfg, train_config=cfg,
                                log_path=log_path)
        est.fit(arrays["images"], arrays["masks"])
    else:
        X = {"mhi": arrays["mhi"], "masks": arrays["masks"]}
        y = (arrays["body"], arrays["f"], arrays["u"])
        if args.stage == "stage1":
            est = Stage1PoseEstimator(net_config=net_cfg, train_config=cfg,
                                      intrinsics=ds.intrinsics,
                                      log_path=log_path)
        else:
            stage1 = Stage1PoseEstimator.load(args.stage1_weights,
                                              intrinsics=ds.intrinsics)
            # volume-net settings may differ from the defaults, but the
            # backbone fields must match the loaded stage1 weights
            net_cfg = apply_settings(stage1.net_.cfg, _split_pairs(args.net))
            est = Stage2Refiner(stage1=stage1, net_config=net_cfg,
                                train_config=cfg, intrinsics=ds.intrinsics,
                                log_path=log_path)
        est.fit(X, y)

    est.save(args.out)
    if est.final_loss_ is not None:
        print(f"final training loss {est.final_loss_!r}"
              f" after {est.n_iter_} steps")
    print(f"saved {args.stage} weights to {args.out}")
    print(f"loss log written to {log_path}")
    return 0


def _sequence_inputs(seq):
    return {"mhi": seq.mhi, "masks": seq.masks}


def _method_table(rows):
    header = (f"{'method':<16}{'frames':>7}{'kp avg':>9}{'kp std':>9}"
              f"{'f avg':>9}{'f std':>9}{'u avg':>9}{'u std':>9}")
    lines = [header, "-" * len(header)]
    for s in rows:
        lines.append(f"{s.name:<16}{s.frames:>7}"
                     f"{s.keypoint_avg_cm:>9.2f}{s.keypoint_std_cm:>9.2f}"
                     f"{s.facing_avg_deg:>9.2f}{s.facing_std_deg:>9.2f}"
                     f"{s.up_avg_deg:>9.2f}{s.up_std_deg:>9.2f}")
    return "\n".join(lines) + "\n"


def cmd_eval(args):
    _apply_determinism(args)
    ds = load_dataset(args.data)
    stage1 = Stage1PoseEstimator.load(args.stage1_weights,
                                      intrinsics=ds.intrinsics)
    stage2 = None
    if args.stage2_weights:
        stage2 = Stage2Refiner.load(args.stage2_weights, stage1=stage1,
                                    intrinsics=ds.intrinsics)
    methods = ["stage1"]
    if stage2 is not None:
        methods.append("stage2")
    methods += ["allstand", "allsit"]
    if args.include_ground_truth:
        methods.append("groundtruth")
    baselines = {name: baseline_pose(name) for name in ("allstand", "allsit")}

    frame_rows = []
    samples = []
    model_samples = []
    for seq in ds.sequences:
        X = _sequence_inputs(seq)
        preds = {"stage1": stage1.predict(X)}
        if stage2 is not None:
            preds["stage2"] = stage2.predict(X)
        for i in range(seq.frames):
            gt_body = seq.body[i].reshape(-1, 3)
            gt_head = HeadPose(f=seq.head_local_f[i], u=seq.head_local_u[i])
            for method in methods:
                if method in preds:
                    body, f, u = preds[method]
                    est_body = body[i].reshape(-1, 3)
                    est_head = HeadPose(f=f[i], u=u[i])
                elif method == "groundtruth":
                    est_body, est_head = gt_body, gt_head
                else:
                    est_body, est_head = baselines[method]
                kp = keypoint_error(est_body, gt_body)
                f_deg, u_deg = head_angle_error(est_head, gt_head)
                frame_rows.append((seq.name, str(i), method, _fmt(kp),
                                   _fmt(f_deg), _fmt(u_deg)))
                samples.append((method, kp, f_deg, u_deg))
                if method == "stage1":
                    model_samples.append((seq.name, kp, f_deg, u_deg))

    os.makedirs(args.out_dir, exist_ok=True)
    _write_csv(os.path.join(args.out_dir, "frames.csv"),
               ("sequence", "frame", "method", "keypoint_cm", "facing_deg",
                "up_deg"), frame_rows)

    method_rows = build_report(samples).sequences
    summary_rows = [(s.name, str(s.frames), _fmt(s.keypoint_avg_cm),
                     _fmt(s.keypoint_std_cm), _fmt(s.facing_avg_deg),
                     _fmt(s.facing_std_deg), _fmt(s.up_avg_deg),
                     _fmt(s.up_std_deg)) for s in method_rows]
    _write_csv(os.path.join(args.out_dir, "summary.csv"),
               ("method", "frames", "keypoint_avg_cm", "keypoint_std_cm",
                "facing_avg_deg", "facing_std_deg", "up_avg_deg",
                "up_std_deg"), summary_rows)

    table = _method_table(method_rows)
    with open(os.path.join(args.out_dir, "summary.txt"), "w",
              encoding="ascii") as fh:
        fh.write(table)
    with open(os.path.join(args.out_dir, "stage1_sequences.csv"), "w",
              encoding="ascii") as fh:
        fh.write(build_report(model_samples).to_csv())
    print(table, end="")
    return 0


def cmd_infer(args):
    _apply_determinism(args)
    ds = load_dataset(args.data)
    stage1 = Stage1PoseEstimator.load(args.stage1_weights,
                                      intrinsics=ds.intrinsics)
    model = stage1
    if args.stage2_weights:
        model = Stage2Refiner.load(args.stage2_weights, stage1=stage1,
                                   intrinsics=ds.intrinsics)
    if args.plot:
        os.makedirs(args.plot, exist_ok=True)

    pose_rows = []
    world_rows = []
    figures = 0
    for seq in ds.sequences:
        body, f, u = model.predict(_sequence_inputs(seq))
        fallback = None
        for i in range(seq.frames):
            pose_rows.append((seq.name, str(i))
                             + tuple(_fmt(v) for v in body[i])
                             + tuple(_fmt(v) for v in f[i])
                             + tuple(_fmt(v) for v in u[i]))
            if args.plot:
                figure = render_pose_figure(body[i], f[i], u[i])
                write_ppm(os.path.join(args.plot,
                                       f"{seq.name}_{i:05d}.ppm"), figure)
                figures += 1
            if args.global_track:
                cam = CameraPose(rotation=seq.cam_rotation[i].reshape(3, 3),
                                 position=seq.cam_position[i])
                world, fallback = reposition_global(
                    body[i].reshape(-1, 3), HeadPose(f=f[i], u=u[i]), cam,
                    scale=float(np.ravel(seq.norm_scale[i])[0]),
                    fallback_yaw=fallback)
                world_rows.append((seq.name, str(i))
                                  + tuple(_fmt(v) for v in world.reshape(-1)))

    _write_csv(args.out, ("sequence", "frame") + POSE_COLUMNS + HEAD_COLUMNS,
               pose_rows)
    print(f"wrote {len(pose_rows)} frames to {args.out}")
    if args.plot:
        print(f"wrote {figures} figures to {args.plot}")
    if args.global_track:
        _write_csv(args.global_track,
                   ("sequence", "frame") + POSE_COLUMNS, world_rows)
        print(f"wrote world track to {args.global_track}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="egospan",
        description="Egocentric pose pipeline: synthesize data, train the"
                    " two-stage model, evaluate, and run inference.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "synth", help="generate a labeled synthetic dataset",
        description="Generate a synthetic dataset directory. Output is"
                    " deterministic in the seed: rerunning with the same"
                    " settings produces a byte-identical tree.")
    p.add_argument("--out", required=True,
                   help="output directory (created if missing)")
    p.add_argument("--motions", required=True,
                   help="comma-separated procedural motion names; options: "
                        + ", ".join(sorted(procedural_motions())))
    p.add_argument("--frames", type=int, default=600,
                   help="frames per sequence (default 600)")
    p.add_argument("--seed", type=int, default=0,
                   help="dataset seed; sequence i uses seed + 104729 * i"
                        " (default 0)")
    p.add_argument("--fps", type=float, default=30.0,
                   help="capture rate in frames per second (default 30)")
    p.add_argument("--render", choices=("full", "mask"), default="full",
                   help="full writes masks and RGB composites, mask writes"
                        " masks only (default full)")
    p.add_argument("--size", type=int, default=256,
                   help="square image side in pixels (default 256)")
    p.add_argument("--fov", type=float, default=None,
                   help="fisheye field of view in degrees (default 180)")
    p.add_argument("--radius-scale", type=float, default=1.0,
                   help="capsule radius multiplier (default 1.0)")
    p.add_argument("--workers", type=int, default=None,
                   help="render workers; EGOSPAN_THREADS caps this"
                        " (default: the cap)")
    p.add_argument("--deterministic", action="store_true",
                   help="force single-worker execution")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser(
        "train", help="fit weights on a dataset",
        description="Train one pipeline stage and save its weights plus a"
                    " plain-text settings sidecar and a per-step loss CSV.")
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--stage", choices=("shape", "stage1", "stage2"),
                   default="stage1",
                   help="which model to train (default stage1)")
    p.add_argument("--out", required=True, help="weights output path")
    p.add_argument("--log", default=None,
                   help="loss CSV path (default: <out>.loss.csv)")
    p.add_argument("--stage1-weights", default=None,
                   help="fitted stage1 weights, required for --stage stage2")
    p.add_argument("--epochs", type=int, default=None,
                   help=f"training epochs (default {TrainConfig().epochs})")
    p.add_argument("--batch-size", type=int, default=None,
                   help=f"batch size (default {TrainConfig().batch_size})")
    p.add_argument("--seed", type=int, default=None,
                   help=f"training seed (default {TrainConfig().seed})")
    p.add_argument("--lr", type=float, default=None,
                   help="learning rate (default"
                        f" {TrainConfig().learning_rate})")
    p.add_argument("--lr-decay", type=float, default=None,
                   help="per-epoch learning rate multiplier (default"
                        f" {TrainConfig().lr_decay})")
    p.add_argument("--alpha", type=float, default=None,
                   help="orientation loss weight (default"
                        f" {TrainConfig().alpha})")
    p.add_argument("--beta", type=float, default=None,
                   help="symmetry loss weight (default"
                        f" {TrainConfig().beta})")
    p.add_argument("--gamma", type=float, default=None,
                   help="silhouette consistency weight (default"
                        f" {TrainConfig().gamma})")
    p.add_argument("--optimizer", choices=("adam", "sgd"), default=None,
                   help=f"optimizer (default {TrainConfig().optimizer})")
    p.add_argument("--volume-side", type=float, default=None,
                   help="refinement volume side in meters (default"
                        f" {TrainConfig().volume_side:.4f})")
    p.add_argument("--train", action="append", metavar="KEY=VALUE",
                   help="extra training setting; unknown keys are rejected"
                        " (repeatable)")
    p.add_argument("--net", action="append", metavar="KEY=VALUE",
                   help="network architecture setting; unknown keys are"
                        " rejected (repeatable)")
    p.add_argument("--no-preflight", action="store_true",
                   help="skip the finite-difference gradient gate")
    p.add_argument("--smoke", action="store_true",
                   help="ignore --data and overfit a pinned 8-frame fixture"
                        f" for {SMOKE_STEPS} steps; fails (exit 4) unless the"
                        f" final pose loss is under {SMOKE_TARGET}")
    p.add_argument("--deterministic", action="store_true",
                   help="force single-worker execution")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "eval", help="score saved weights against a labeled dataset",
        description="Evaluate weights on a dataset next to the constant"
                    " AllStand/AllSit baselines. Writes per-frame errors"
                    " (frames.csv), per-method aggregates (summary.csv,"
                    " summary.txt), and a per-sequence breakdown of the"
                    " stage1 model (stage1_sequences.csv).")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--stage1-weights", required=True,
                   help="fitted stage1 weights")
    p.add_argument("--stage2-weights", default=None,
                   help="optional stage2 weights, adds a stage2 row")
    p.add_argument("--out-dir", required=True,
                   help="report directory (created if missing)")
    p.add_argument("--include-ground-truth", action="store_true",
                   help="add a groundtruth row (all zeros, sanity check)")
    p.add_argument("--deterministic", action="store_true",
                   help="force single-worker execution")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "infer", help="write per-frame pose predictions",
        description="Run the fitted model over a dataset and write one CSV"
                    " row per frame: 45 keypoint coordinates in the"
                    " normalized body frame plus the facing and up"
                    " directions.")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--stage1-weights", required=True,
                   help="fitted stage1 weights")
    p.add_argument("--stage2-weights", default=None,
                   help="optional stage2 weights for refined keypoints")
    p.add_argument("--out", required=True, help="prediction CSV path")
    p.add_argument("--plot", default=None,
                   help="directory for one PPM skeleton figure per frame")
    p.add_argument("--global", dest="global_track", default=None,
                   metavar="CSV",
                   help="also write a world-frame keypoint track, placed"
                        " with the recorded camera poses")
    p.add_argument("--deterministic", action="store_true",
                   help="force single-worker execution")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (DataError, ParseError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except NumericalError as err:
        print(f"error: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
