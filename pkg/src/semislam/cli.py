"""Command-line entry point.

Subcommands: ``run`` (SLAM over a dataset directory), ``eval-align``
(scale+roll registration of a map export against a reference surface),
``synth`` (dataset generation), ``vocab`` (vocabulary training).

Exit codes: 0 success, 1 runtime failure, 2 input error.
"""

from __future__ import annotations

import argparse
import glob
import os
import sys

import numpy as np

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INPUT = 2


def _parse_pose7(text):
    from .geometry import Pose, rotation_from_quat

    vals = [float(v) for v in text.split(",")]
    if len(vals) != 7:
        raise ValueError("pose needs 7 comma-separated values: tx,ty,tz,qw,qx,qy,qz")
    c = np.array(vals[:3])
    R_cw = rotation_from_quat(vals[3:])
    return Pose(R_cw.T, -R_cw.T @ c)


def default_vocab_path() -> str:
    return os.path.join(os.path.dirname(__file__), "data", "vocab.bin")


def cmd_run(args) -> int:
    from .config import Config, ConfigError, load_config
    from .geometry import CalibrationFileError
    from .pipeline import SlamSystem
    from .relocate import Vocabulary
    from .synth import SynthError, load_dataset, read_pgm
    from .tracking import TRACKING, save_trajectory

    try:
        data = load_dataset(args.dataset)
    except (SynthError, CalibrationFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        cfg = load_config(args.config) if args.config else Config()
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    vocab = None
    vocab_path = args.vocab or default_vocab_path()
    if os.path.isfile(vocab_path):
        vocab = Vocabulary.load(vocab_path)

    print("# effective configuration")
    print(cfg.dump())
    os.makedirs(args.out, exist_ok=True)
    outputs = [os.path.join(args.out, n) for n in ("trajectory.txt", "map.txt", "stats.txt")]
    try:
        system = SlamSystem(data.cam, cfg, vocab=vocab,
                            deterministic=args.deterministic,
                            densify=(args.densify == "on"))
        for fpath, ts in zip(data.frames, data.timestamps):
            img = read_pgm(fpath)
            system.process_frame(img, float(ts))
        system.finish()
        save_trajectory(outputs[0], system.trajectory)
        system.map.export_text(outputs[1])
        with open(outputs[2], "w", encoding="ascii") as fh:
            fh.write(system.stats_text())
        tracked = sum(1 for r in system.results if r.status == TRACKING)
        print(f"tracked {tracked}/{len(system.results)} frames, "
              f"{len(system.map.points)} map points, {len(system.map.keyframes)} keyframes")
        return EXIT_OK
    except Exception as exc:  # remove partial outputs on failure
        for p in outputs:
            if os.path.exists(p):
                os.remove(p)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def cmd_eval_align(args) -> int:
    from .evaluate import EvalError, align_scale_roll, load_mesh
    from .worldmap import MapError, load_map_points

    try:
        points, prov, kfs = load_map_points(args.map)
        mesh = load_mesh(args.surface)
    except (EvalError, MapError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    if args.provenance != "all":
        sel = prov == args.provenance
        points = points[sel]
    if len(points) == 0:
        print("error: no points after provenance filter", file=sys.stderr)
        return EXIT_INPUT

    axis = np.array([float(v) for v in args.axis.split(",")])
    verts = mesh.vertices
    if args.pivot_est or args.pivot_gt:
        if not (args.pivot_est and args.pivot_gt):
            print("error: --pivot-est and --pivot-gt must be given together", file=sys.stderr)
            return EXIT_INPUT
        try:
            p_est = _parse_pose7(args.pivot_est)
            p_gt = _parse_pose7(args.pivot_gt)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INPUT
        points = p_est.transform(points)   # map points into the estimated pivot camera
        verts = p_gt.transform(verts)      # surface into the reference pivot camera
        from .evaluate import Mesh

        mesh = Mesh(verts, mesh.faces)

    lo, hi = (float(v) for v in args.lam_range.split(","))
    lam_grid = np.geomspace(lo, hi, args.lam_steps)
    theta_grid = np.arange(-180.0, 180.0, args.theta_step)
    try:
        result = align_scale_roll(points, mesh, axis, lam_grid, theta_grid, keep=args.keep)
    except EvalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    if result.coarse_lam in (lam_grid[0], lam_grid[-1]):
        print("warning: best scale lies on the grid boundary; widen --lam-range", file=sys.stderr)

    report = (
        f"lambda={result.lam:.9g}\n"
        f"theta_deg={result.theta_deg:.9g}\n"
        f"rmse_mm={result.rmse:.9g}\n"
        f"n_points={len(points)}\n"
        f"kept_fraction={result.kept_fraction}\n"
    )
    print(report, end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "alignment.txt"), "w", encoding="ascii") as fh:
            fh.write(report)
        with open(os.path.join(args.out, "residuals.csv"), "w", encoding="ascii") as fh:
            fh.write("index,residual_mm\n")
            for i, r in enumerate(result.residuals):
                fh.write(f"{i},{r:.9g}\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .geometry import CameraModel
    from .synth import SynthError, make_surface, make_trajectory, write_dataset

    cam = CameraModel(fx=460.0, fy=460.0, cx=320.0, cy=240.0, k1=-0.08, k2=0.01,
                      width=args.width, height=args.height)
    try:
        surface = make_surface(args.kind, args.extent, seed=args.seed, contrast=args.contrast)
        traj = make_trajectory(
            args.traj, args.frames, distance=args.distance, elev_deg=args.elev,
            az_start=args.az_start, az_end=args.az_end,
            breathing_amp=args.breathing_amp, breathing_period=args.breathing_period,
            kidnap_away=args.kidnap_away, seed=args.seed,
        )
        occ = None
        if args.occlude:
            lo, hi = (int(v) for v in args.occlude.split(","))
            occ = range(lo, hi)
        write_dataset(args.out, surface, traj, cam, occluder_frames=occ)
    except (SynthError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(f"wrote {args.frames} frames to {args.out}")
    return EXIT_OK


def cmd_vocab(args) -> int:
    from .config import Config
    from .relocate import RelocateError, train_vocabulary
    from .synth import SynthError, read_pgm
    from .tracking import make_frame

    files = sorted(glob.glob(os.path.join(args.corpus, "*.pgm")))
    if not files:
        print(f"error: no .pgm images in {args.corpus}", file=sys.stderr)
        return EXIT_INPUT
    cfg = Config()
    corpus = []
    try:
        for i, f in enumerate(files):
            frame = make_frame(read_pgm(f), i, 0.0, cfg)
            corpus.append(frame.descriptors)
        vocab = train_vocabulary(corpus, k=args.k, L=args.L, seed=args.seed)
    except (SynthError, RelocateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT if isinstance(exc, (SynthError, RelocateError)) else EXIT_RUNTIME
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    vocab.save(args.out)
    print(f"trained vocabulary: {vocab.n_words} words from {len(files)} images -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="semislam",
                                 description="monocular semi-dense keyframe SLAM")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run SLAM over a dataset directory")
    p.add_argument("dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--densify", choices=("on", "off"), default="on")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--vocab", default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval-align", help="scale+roll alignment of a map vs a surface")
    p.add_argument("map")
    p.add_argument("surface")
    p.add_argument("--axis", default="0,0,1")
    p.add_argument("--lam-range", default="0.25,4.0")
    p.add_argument("--lam-steps", type=int, default=200)
    p.add_argument("--theta-step", type=float, default=1.0)
    p.add_argument("--keep", type=float, default=0.8)
    p.add_argument("--provenance", choices=("all", "O", "D"), default="all")
    p.add_argument("--pivot-est", default=None,
                   help="estimated pivot camera pose tx,ty,tz,qw,qx,qy,qz (camera-in-world)")
    p.add_argument("--pivot-gt", default=None,
                   help="reference pivot camera pose in the surface frame")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval_align)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--kind", choices=("plane", "hemisphere", "relief"), default="hemisphere")
    p.add_argument("--traj", choices=("arc", "orbit", "kidnap", "breathing"), default="arc")
    p.add_argument("--frames", type=int, default=240)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extent", type=float, default=100.0)
    p.add_argument("--contrast", type=float, default=100.0)
    p.add_argument("--distance", type=float, default=145.0)
    p.add_argument("--elev", type=float, default=55.0)
    p.add_argument("--az-start", type=float, default=-40.0)
    p.add_argument("--az-end", type=float, default=40.0)
    p.add_argument("--breathing-amp", type=float, default=0.0)
    p.add_argument("--breathing-period", type=int, default=60)
    p.add_argument("--kidnap-away", type=int, default=60)
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=480)
    p.add_argument("--occlude", default=None, help="frame range lo,hi to occlude")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("vocab", help="train a vocabulary from a directory of PGM images")
    p.add_argument("corpus")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--L", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vocab)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
