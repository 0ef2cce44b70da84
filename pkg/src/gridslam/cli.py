"""Command-line front end.

Subcommands cover the full pipeline: synthetic scene generation,
decoder/encoder training, per-submap optimization, frame tracking,
submap alignment, fusion, joint refinement, evaluation, and slice
export. Heavy imports happen inside handlers so --threads can pin
numeric thread pools before numpy loads.
"""

import argparse
import os
import sys

POSES_GT = "poses_gt.txt"
POSES_ESTIMATE = "poses_estimate.txt"
POSES_REFINED = "poses_refined.txt"
BASE_POSES_GT = "base_poses_gt.txt"


def _pin_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS",
                "VECLIB_MAXIMUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)


def _parse_cells(text: str):
    return [float(tok) for tok in text.replace(",", " ").split()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)

    grid_opts = argparse.ArgumentParser(add_help=False)
    grid_opts.add_argument("--cells", default="0.5,0.1",
                           help="per-level cell sizes, coarse first")
    grid_opts.add_argument("--feature-dim", type=int, default=4)

    scene_opts = argparse.ArgumentParser(add_help=False)
    scene_opts.add_argument("--waypoints", type=int, default=5)
    scene_opts.add_argument("--frames-per-leg", type=int, default=6)
    scene_opts.add_argument("--label-mode", choices=("isdf-like", "oracle"),
                            default="isdf-like")
    scene_opts.add_argument("--near-band", type=float, default=0.3)
    scene_opts.add_argument("--n-near", type=int, default=2)
    scene_opts.add_argument("--n-free", type=int, default=3)
    scene_opts.add_argument("--noise-sigma", type=float, default=None,
                            help="depth noise std in meters")

    parser = argparse.ArgumentParser(
        prog="gridslam",
        description="multiresolution feature-grid SLAM on signed "
                    "distance fields")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", parents=[common, scene_opts],
                       help="render a synthetic sequence into submap dirs")
    p.add_argument("--out", required=True)
    p.add_argument("--scene", help="scene config (default: built-in room)")
    p.add_argument("--random-scene", action="store_true",
                   help="draw a randomized room from the seed")
    p.add_argument("--every-n", type=int, default=0,
                   help="frames per submap (0 = single submap)")
    p.add_argument("--pose-noise-deg", type=float, default=0.0)
    p.add_argument("--pose-noise-m", type=float, default=0.0)
    p.add_argument("--base-noise-deg", type=float, default=0.0)
    p.add_argument("--base-noise-m", type=float, default=0.0)
    p.set_defaults(handler=cmd_gen_scene)

    p = sub.add_parser("pretrain", parents=[common, grid_opts, scene_opts],
                       help="train the shared decoder on random scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=2)
    p.add_argument("--epochs", type=int, default=1200)
    p.add_argument("--fine-after", type=int, default=200)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--trace", help="optional per-epoch loss csv")
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("train-encoders",
                       parents=[common, grid_opts, scene_opts],
                       help="train per-level feature encoders")
    p.add_argument("--decoder", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=2)
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--rot-noise-deg", type=float, default=1.0)
    p.add_argument("--tran-noise-m", type=float, default=0.01)
    p.set_defaults(handler=cmd_train_encoders)

    p = sub.add_parser("local-slam", parents=[common, grid_opts],
                       help="optimize features and poses of one submap")
    p.add_argument("--submap", required=True)
    p.add_argument("--out", help="output dir (default: the submap dir)")
    p.add_argument("--decoder", help="decoder checkpoint "
                                     "(default: fixed linear decoder)")
    p.add_argument("--encoders", help="encoder checkpoint for --init encoder")
    p.add_argument("--init", choices=("closed_form", "encoder", "zero"),
                   default="closed_form")
    p.add_argument("--damp", type=float, default=0.0,
                   help="ridge damping for the closed-form init")
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-poses", type=float, default=1e-3)
    p.add_argument("--freeze-poses", action="store_true")
    p.add_argument("--sample-fraction", type=float, default=None)
    p.add_argument("--tau", type=float, default=None,
                   help="trust-region radius override")
    p.set_defaults(handler=cmd_local_slam)

    p = sub.add_parser("track", parents=[common],
                       help="refine one frame pose against a fixed submap")
    p.add_argument("--submap", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--voxel", type=float, default=0.6)
    p.add_argument("--out", required=True, help="pose output file")
    p.set_defaults(handler=cmd_track)

    p = sub.add_parser("align", parents=[common],
                       help="coarse-to-fine alignment of submap base poses")
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--feature-iters", default="45,45")
    p.add_argument("--sdf-iters", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--dist", choices=("l2sq", "l1", "negcos"),
                   default="l2sq")
    p.add_argument("--max-samples", type=int, default=4096)
    p.add_argument("--tau", type=float, default=0.3)
    p.add_argument("--gt", help="ground-truth base poses "
                               "(default: <graph>/base_poses_gt.txt)")
    p.set_defaults(handler=cmd_align)

    p = sub.add_parser("fuse", parents=[common],
                       help="sample the fused field on a world lattice")
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cell", type=float, default=0.05)
    p.add_argument("--poses", help="refined base poses to apply")
    p.set_defaults(handler=cmd_fuse)

    p = sub.add_parser("global-ba", parents=[common],
                       help="joint refinement of features and all poses")
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--tau", type=float, default=0.3)
    p.add_argument("--poses", help="base poses to start from")
    p.set_defaults(handler=cmd_global_ba)

    p = sub.add_parser("eval", parents=[common],
                       help="compare a sampled field against a scene")
    p.add_argument("--field", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--band", type=float, default=0.1)
    p.add_argument("--surface-points", type=int, default=800,
                   help="cloud size for chamfer/f-score (0 = skip)")
    p.add_argument("--threshold", type=float, default=0.05)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("slice", parents=[common],
                       help="export a planar slice of a sampled field")
    p.add_argument("--field", required=True)
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.add_argument("--coord", type=float, required=True)
    p.add_argument("--res", type=int, default=128)
    p.add_argument("--out", required=True)
    p.add_argument("--pgm", help="optional preview image path")
    p.set_defaults(handler=cmd_slice)

    return parser


# ---- shared handler plumbing ----

def _load_scene_and_sensor(args, rng):
    from . import sim
    from .io import Config

    if args.scene:
        cfg = Config.load(args.scene)
        scene = sim.scene_from_config(cfg)
        sensor = sim.sensor_from_config(cfg)
    elif getattr(args, "random_scene", False):
        scene = sim.random_room_scene(rng)
        sensor = sim.SensorModel()
    else:
        scene = sim.default_room_scene()
        sensor = sim.SensorModel()
    if args.noise_sigma is not None:
        sensor.noise_sigma = args.noise_sigma
    return scene, sensor


def _sensor_to_config(cfg, sensor) -> None:
    cfg.set("sensor.kind", sensor.kind)
    cfg.set("sensor.n_azimuth", sensor.n_azimuth)
    cfg.set("sensor.n_elevation", sensor.n_elevation)
    cfg.set("sensor.elevation_lo", f"{sensor.elevation_lo:.17g}")
    cfg.set("sensor.elevation_hi", f"{sensor.elevation_hi:.17g}")
    cfg.set("sensor.max_range", f"{sensor.max_range:.17g}")
    cfg.set("sensor.noise_sigma", f"{sensor.noise_sigma:.17g}")
    if sensor.kind == "pinhole":
        for key in ("fx", "fy", "cx", "cy", "width", "height"):
            cfg.set(f"sensor.{key}", getattr(sensor, key))


def _simulate_submaps(args, scene, sensor, rng):
    from . import sim
    frames = sim.simulate_trajectory(
        scene, sim.orbit_waypoints(scene, n=args.waypoints), sensor,
        args.frames_per_leg, rng, mode=args.label_mode, n_near=args.n_near,
        n_free=args.n_free, near_band=args.near_band)
    every = getattr(args, "every_n", 0) or len(frames)
    return sim.split_submaps(frames, every)


def _training_submaps(args, rng):
    """Randomized scene submaps with grids attached, for training.

    Rooms whose random furniture intersects the orbit path are
    discarded and redrawn.
    """
    from . import sim
    from .errors import InsufficientScenes, SensorInsideSurface
    from .local import Submap

    submaps = []
    scenes = []
    attempts = 0
    while len(submaps) < args.scenes:
        attempts += 1
        if attempts > 8 * args.scenes:
            raise InsufficientScenes(
                f"gave up after {attempts - 1} scene draws, kept "
                f"{len(submaps)}/{args.scenes}")
        scene = sim.random_room_scene(rng)
        sensor = sim.SensorModel(
            noise_sigma=args.noise_sigma if args.noise_sigma else 0.0)
        try:
            frames = sim.simulate_trajectory(
                scene, sim.orbit_waypoints(scene, n=args.waypoints), sensor,
                args.frames_per_leg, rng, mode=args.label_mode,
                n_near=args.n_near, n_free=args.n_free,
                near_band=args.near_band)
        except SensorInsideSurface:
            continue
        shell = sim.split_submaps(frames, len(frames))[0]
        sm = Submap.from_shell(shell, submap_id=len(submaps))
        sm.attach_grid(_parse_cells(args.cells), args.feature_dim)
        submaps.append(sm)
        scenes.append(scene)
    return submaps, scenes


def _load_graph(graph_dir, poses_path=None, need_grids=True):
    import glob

    from . import io
    from .errors import IoError
    from .globalopt import SubmapGraph
    from .local import load_submap

    dirs = sorted(glob.glob(os.path.join(graph_dir, "submap_*")))
    if not dirs:
        raise IoError(f"{graph_dir}: no submap_* directories")
    submaps = [load_submap(d) for d in dirs]
    if need_grids:
        missing = [d for sm, d in zip(submaps, dirs) if sm.grid is None]
        if missing:
            raise IoError(f"missing grid.bin under {missing[0]} "
                          "(run local-slam first)")
    if poses_path:
        poses = io.load_poses(poses_path)
        if len(poses) != len(submaps):
            raise IoError(f"{poses_path}: {len(poses)} poses for "
                          f"{len(submaps)} submaps")
        for sm, pose in zip(submaps, poses):
            sm.base_pose = pose
    return SubmapGraph(submaps), dirs


def _write_trace_csv(path, rows, header) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(
                f"{v:.17g}" if isinstance(v, float) else str(v)
                for v in row) + "\n")


# ---- handlers ----

def cmd_gen_scene(args) -> int:
    import numpy as np

    from . import geometry, io, sim
    from .local import Submap, save_submap

    rng = np.random.default_rng(args.seed)
    scene, sensor = _load_scene_and_sensor(args, rng)
    shells = _simulate_submaps(args, scene, sensor, rng)

    os.makedirs(args.out, exist_ok=True)
    cfg = sim.scene_to_config(scene)
    _sensor_to_config(cfg, sensor)
    cfg.save(os.path.join(args.out, "scene.cfg"))

    gt_bases = []
    for si, shell in enumerate(shells):
        sm = Submap.from_shell(shell, submap_id=si)
        gt_bases.append(sm.base_pose.copy())
        gt_poses = [fr.pose_estimate.copy() for fr in sm.frames]
        if args.pose_noise_deg > 0.0 or args.pose_noise_m > 0.0:
            for fr in sm.frames:
                fr.pose_estimate = geometry.perturb_pose(
                    fr.pose_estimate, args.pose_noise_deg, args.pose_noise_m,
                    rng)
        if args.base_noise_deg > 0.0 or args.base_noise_m > 0.0:
            sm.base_pose = geometry.perturb_pose(
                sm.base_pose, args.base_noise_deg, args.base_noise_m, rng)
        save_submap(os.path.join(args.out, f"submap_{si:02d}"), sm,
                    gt_poses=gt_poses)
    io.save_poses(os.path.join(args.out, BASE_POSES_GT), gt_bases)
    print(f"wrote {len(shells)} submap(s) under {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    import numpy as np

    from .grid import save_decoder
    from .training import PretrainConfig, pretrain_decoder

    rng = np.random.default_rng(args.seed)
    submaps, _ = _training_submaps(args, rng)
    config = PretrainConfig(epochs=args.epochs, fine_after=args.fine_after,
                            lr=args.lr, hidden=args.hidden, seed=args.seed)
    decoder, trace = pretrain_decoder(submaps, config)
    save_decoder(args.out, decoder)
    if args.trace:
        _write_trace_csv(args.trace, list(enumerate(trace)),
                         ["epoch", "loss"])
    print(f"decoder with {decoder.param_count()} parameters -> {args.out}")
    return 0


def cmd_train_encoders(args) -> int:
    import numpy as np

    from .grid import load_decoder
    from .local import save_encoders
    from .training import EncoderTrainConfig, train_encoders

    rng = np.random.default_rng(args.seed)
    decoder = load_decoder(args.decoder)
    submaps, _ = _training_submaps(args, rng)
    for sm in submaps:
        sm.decoder = decoder
        sm.grid.init_features_normal(rng)
    config = EncoderTrainConfig(epochs=args.epochs, lr=args.lr,
                                rot_noise_deg=args.rot_noise_deg,
                                tran_noise_m=args.tran_noise_m,
                                seed=args.seed)
    encoders = train_encoders(submaps, config)
    save_encoders(args.out, encoders)
    total = sum(enc.param_count() for enc in encoders)
    print(f"{len(encoders)} encoders ({total} parameters) -> {args.out}")
    return 0


def cmd_local_slam(args) -> int:
    from . import io
    from .costs import CostConfig
    from .grid import Decoder, load_decoder, save_grid
    from .local import (LocalSlamConfig, hierarchical_init, load_encoders,
                        load_submap, local_slam)

    submap = load_submap(args.submap)
    cells = _parse_cells(args.cells)
    if args.decoder:
        submap.decoder = load_decoder(args.decoder)
    else:
        submap.decoder = Decoder.canonical_linear(len(cells),
                                                  args.feature_dim)
    submap.attach_grid(cells, args.feature_dim)

    encoders = load_encoders(args.encoders) if args.encoders else None
    hierarchical_init(submap, method=args.init, encoders=encoders,
                      damp=args.damp)

    costs = CostConfig()
    if args.tau is not None:
        costs.tau = args.tau
    config = LocalSlamConfig(epochs=args.epochs, lr_features=args.lr,
                             lr_poses=args.lr_poses,
                             freeze_poses=args.freeze_poses,
                             sample_fraction=args.sample_fraction,
                             seed=args.seed, costs=costs)
    poses, trace, skipped = local_slam(submap, config)

    out = args.out or args.submap
    os.makedirs(out, exist_ok=True)
    save_grid(os.path.join(out, "grid.bin"), submap.grid, submap.decoder)
    io.save_poses(os.path.join(out, POSES_REFINED), poses)
    _write_trace_csv(os.path.join(out, "loss_trace.csv"), trace,
                     ["epoch", "data_cost", "reg_cost", "skipped_points"])
    final = trace[-1]
    print(f"epoch {final[0]}: data {final[1]:.6g} reg {final[2]:.6g} "
          f"skipped {skipped}")
    return 0


def cmd_track(args) -> int:
    from . import io
    from .errors import IoError
    from .local import load_gt_poses, load_submap, track_frame

    submap = load_submap(args.submap)
    if submap.grid is None:
        raise IoError(f"{args.submap}: no grid.bin (run local-slam first)")
    if not 0 <= args.frame < len(submap.frames):
        raise IoError(f"frame {args.frame} out of range "
                      f"(0..{len(submap.frames) - 1})")
    pose = track_frame(submap, submap.frames[args.frame], iters=args.iters,
                       lr=args.lr, voxel=args.voxel)
    io.save_poses(args.out, [pose])
    gt = load_gt_poses(args.submap)
    if gt is not None:
        from . import geometry
        rot, tran = geometry.pose_error(gt[args.frame], pose)
        print(f"frame {args.frame}: rot err {rot:.4f} deg, "
              f"tran err {tran:.4f} m")
    else:
        print(f"frame {args.frame}: pose written to {args.out}")
    return 0


def cmd_align(args) -> int:
    from . import io
    from .globalopt import AlignSchedule, align_submaps

    graph, _ = _load_graph(args.graph)
    gt_path = args.gt or os.path.join(args.graph, BASE_POSES_GT)
    gt = io.load_poses(gt_path) if os.path.exists(gt_path) else None

    from .costs import CostConfig
    schedule = AlignSchedule(
        feature_iters=tuple(int(v) for v in
                            args.feature_iters.replace(",", " ").split()),
        sdf_iters=args.sdf_iters, lr=args.lr, dist=args.dist,
        max_samples=args.max_samples, costs=CostConfig(tau=args.tau))
    poses, report = align_submaps(graph, schedule, gt_base_poses=gt)

    os.makedirs(args.out, exist_ok=True)
    io.save_poses(os.path.join(args.out, "base_poses.txt"), poses)
    if report:
        header = list(report[0].keys())
        rows = [[row[k] for k in header] for row in report]
        _write_trace_csv(os.path.join(args.out, "align_report.csv"), rows,
                         header)
    last = report[-1] if report else {}
    msg = f"{len(report)} iterations -> {args.out}"
    if gt is not None and report:
        worst = max(v for k, v in last.items()
                    if k.startswith("rot_err_deg_"))
        msg += f" (worst rot err {worst:.4f} deg)"
    print(msg)
    return 0


def cmd_fuse(args) -> int:
    import numpy as np

    from .globalopt import fuse_query, world_box
    from .grid import save_field

    graph, _ = _load_graph(args.graph, poses_path=args.poses)
    boxes = [world_box(sm) for sm in graph.submaps]
    lo = np.min([b[0] for b in boxes], axis=0)
    hi = np.max([b[1] for b in boxes], axis=0)
    dims = np.floor((hi - lo) / args.cell).astype(int) + 2

    xs = [lo[a] + args.cell * np.arange(dims[a]) for a in range(3)]
    xx, yy, zz = np.meshgrid(*xs, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    values = np.zeros(pts.shape[0])
    covered = np.zeros(pts.shape[0], bool)
    for start in range(0, pts.shape[0], 8192):
        sl = slice(start, start + 8192)
        values[sl], covered[sl] = fuse_query(graph, pts[sl])
    save_field(args.out, lo, args.cell, dims, values.reshape(tuple(dims)),
               covered.reshape(tuple(dims)))
    print(f"{int(covered.sum())}/{covered.size} covered lattice points "
          f"-> {args.out}")
    return 0


def cmd_global_ba(args) -> int:
    from . import io
    from .costs import CostConfig
    from .globalopt import global_ba
    from .grid import save_grid

    graph, dirs = _load_graph(args.graph, poses_path=args.poses)
    poses, trace = global_ba(graph, iters=args.iters, lr=args.lr,
                             costs=CostConfig(tau=args.tau))
    os.makedirs(args.out, exist_ok=True)
    io.save_poses(os.path.join(args.out, "base_poses.txt"), poses)
    _write_trace_csv(os.path.join(args.out, "trace.csv"),
                     [(i, loss, skipped)
                      for i, (loss, skipped) in enumerate(trace)],
                     ["iteration", "loss", "skipped"])
    for sm, d in zip(graph.submaps, dirs):
        name = os.path.basename(d.rstrip(os.sep))
        save_grid(os.path.join(args.out, f"{name}_grid.bin"), sm.grid,
                  sm.decoder)
        io.save_poses(os.path.join(args.out, f"{name}_{POSES_REFINED}"),
                      [fr.pose_estimate for fr in sm.frames])
    print(f"{len(trace)} iterations, final loss {trace[-1][0]:.6g} "
          f"-> {args.out}")
    return 0


def cmd_eval(args) -> int:
    import numpy as np

    from . import metrics, sim
    from .grid import load_field
    from .io import Config

    scene = sim.scene_from_config(Config.load(args.scene))
    field_fn = metrics.sampled_field(*load_field(args.field))
    rng = np.random.default_rng(args.seed)

    report = {"sdf_mae": metrics.sdf_mae(
        field_fn, scene, scene.bounds_lo, scene.bounds_hi, rng,
        n_samples=args.samples, band=args.band)}
    if args.surface_points > 0:
        pred = metrics.surface_cloud(field_fn, scene, scene.bounds_lo,
                                     scene.bounds_hi, args.surface_points,
                                     rng, band=args.band)
        truth = metrics.surface_cloud(metrics.scene_field(scene), scene,
                                      scene.bounds_lo, scene.bounds_hi,
                                      args.surface_points, rng,
                                      band=args.band)
        report["chamfer_l1"] = metrics.chamfer_l1(pred, truth)
        report["f_score"] = metrics.f_score(pred, truth,
                                            threshold=args.threshold)
    metrics.save_report(args.out, report)
    for key, value in report.items():
        print(f"{key} = {value:.6g}")
    return 0


def cmd_slice(args) -> int:
    import numpy as np

    from . import metrics
    from .grid import load_field

    origin, cell, dims, values, covered = load_field(args.field)
    field_fn = metrics.sampled_field(origin, cell, dims, values, covered)
    hi = origin + cell * (np.asarray(dims) - 1)
    metrics.export_slice(field_fn, args.axis, args.coord, origin, hi,
                         args.res, args.out, pgm_path=args.pgm)
    print(f"{args.res}x{args.res} slice at {args.axis}={args.coord:g} "
          f"-> {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _pin_threads(args.threads)
    from .errors import GridSlamError
    try:
        return args.handler(args)
    except GridSlamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
