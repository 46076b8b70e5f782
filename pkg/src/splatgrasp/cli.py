"""Command-line entry points.

Exit codes: 0 success, 1 refinement stopped at the iteration budget or grasp
check failed, 2 refinement diverged, 64 usage error, 65 invalid input data,
66 missing or unreadable file.
"""
from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import SplatGraspError, StructuralError
from .grasp_eval import finger_contacts
from .hand_rig import NUM_JOINTS, pose_mesh
from .losses import HeatmapStack, ManoTerms, combined_loss, mano_losses, photometric_loss, soft_argmax
from .refiner import RefineConfig, refine_pose, render_hand_scene
from .splat_binding import bind_gaussians

EXIT_OK = 0
EXIT_NOT_CONVERGED = 1
EXIT_DIVERGED = 2
EXIT_USAGE = 64
EXIT_DATA = 65
EXIT_IO = 66

logger = logging.getLogger("splatgrasp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_binding(cfg: io.ProjectConfig, rig):
    if cfg.binding:
        return io.load_binding(cfg.binding, num_faces=rig.num_faces)
    if not cfg.hand_gaussians:
        raise SplatGraspError("config needs either 'binding' or 'hand_gaussians'")
    return bind_gaussians(io.load_gaussian_ply(cfg.hand_gaussians), rig)


def _load_config(args):
    cfg = io.load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _mano_terms(rig, pose):
    states, verts = pose_mesh(rig, pose)
    return ManoTerms(verts, states.joint_positions, pose.joint_rotations, pose.translation)


def cmd_bind(args):
    rig = io.load_rig(args.rig) if args.rig else io.load_bundled_rig()
    binding = bind_gaussians(io.load_gaussian_ply(args.hand_ply), rig)
    io.save_binding(binding, rig.num_faces, args.out)
    print(f"bound {len(binding)} Gaussians to {rig.num_faces} faces -> {args.out}")
    return EXIT_OK


def cmd_render(args):
    cfg = _load_config(args)
    rig = cfg.load_rig()
    binding = _load_binding(cfg, rig)
    if not cfg.viewpoints:
        raise SplatGraspError("config has no 'viewpoints' file")
    cams = io.load_cameras(cfg.viewpoints)
    if not 0 <= args.camera_index < len(cams):
        raise SplatGraspError(f"camera index {args.camera_index} out of range (0..{len(cams) - 1})")
    pose = io.load_pose(args.pose)
    img, ctx = render_hand_scene(pose, rig, binding, cfg.load_object(), cams[args.camera_index],
                                 cfg.background, cfg.refine.raster)
    io.save_image(img.pixels, args.out)
    print(f"rendered {len(ctx['scene'])} Gaussians -> {args.out}")
    return EXIT_OK


def _write_trace_csv(path, report):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iteration", "view", "loss"])
        for i, (v, loss) in enumerate(zip(report.view_trace, report.loss_trace)):
            w.writerow([i, v, repr(float(loss))])


def cmd_refine(args):
    from .plotting import plot_loss_trace, plot_view_comparison

    cfg = _load_config(args)
    rig = cfg.load_rig()
    binding = _load_binding(cfg, rig)
    obj = cfg.load_object()
    if not cfg.viewpoints:
        raise SplatGraspError("config has no 'viewpoints' file")
    views = io.load_viewpoints(cfg.viewpoints, seed=cfg.seed)
    init = io.load_pose(args.init_pose)
    refine_cfg = cfg.refine
    if args.max_iterations is not None:
        refine_cfg = RefineConfig(**{**refine_cfg.__dict__, "max_iterations": args.max_iterations})
    report = refine_pose(init, rig, binding, obj, views, refine_cfg)

    out = Path(args.out)
    stem = out.with_suffix("")
    pose_path = Path(f"{stem}_pose.json")
    csv_path = Path(f"{stem}_loss_trace.csv")
    trace_png = Path(f"{stem}_loss_trace.png")
    views_png = Path(f"{stem}_views.png")
    io.save_pose(report.final_pose, pose_path)
    _write_trace_csv(csv_path, report)
    plot_loss_trace(report.loss_trace, report.view_trace, trace_png)
    renders = [[render_hand_scene(p, rig, binding, obj, cam, cfg.background, refine_cfg.raster)[0].pixels
                for cam in views.cameras] for p in (init, report.final_pose)]
    plot_view_comparison(views.targets, renders[0], renders[1], views_png)
    doc = {
        "iterations": report.iterations,
        "converged": report.converged,
        "diverged": report.diverged,
        "initial_loss": report.loss_trace[0] if report.loss_trace else None,
        "final_loss": report.loss_trace[-1] if report.loss_trace else None,
        "per_view_loss": report.per_view_loss,
        "seed": cfg.seed,
        "diagnostics": report.diagnostics,
        "final_pose": io.pose_to_dict(report.final_pose),
        "artifacts": {"pose": pose_path.name, "loss_trace_csv": csv_path.name,
                      "loss_trace_png": trace_png.name, "views_png": views_png.name},
    }
    io.write_json(out, doc)
    print("=== refine report ===")
    print(f"iterations: {report.iterations}")
    print(f"converged: {str(report.converged).lower()}")
    print(f"diverged: {str(report.diverged).lower()}")
    if report.loss_trace:
        print(f"loss: {report.loss_trace[0]:.6g} -> {report.loss_trace[-1]:.6g}")
    print("view,final_loss")
    for i, loss in enumerate(report.per_view_loss):
        print(f"{i},{loss:.6g}")
    print(f"wrote: {out}, {pose_path}, {csv_path}, {trace_png}, {views_png}")
    print("=== end ===")
    if report.diverged:
        return EXIT_DIVERGED
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def cmd_loss(args):
    rig = io.load_rig(args.rig) if args.rig else io.load_bundled_rig()
    weights = io.LossWeights() if not args.config else io.load_config(args.config).loss_weights
    pred = _mano_terms(rig, io.load_pose(args.pred))
    truth = _mano_terms(rig, io.load_pose(args.truth))
    br = mano_losses(pred, truth, weights)
    if args.rendered or args.target:
        if not (args.rendered and args.target):
            raise UsageError("--rendered and --target must be given together")
        br.img = photometric_loss(io.load_image(args.rendered), io.load_image(args.target), weights.lambda_1)
    elif args.img_loss is not None:
        br.img = float(args.img_loss)
    if args.epoch is not None:
        if args.epochs is None:
            raise UsageError("--epoch needs --epochs")
        br.total, br.alpha = combined_loss(br.mano, br.img or 0.0, args.epoch, args.epochs)
        br.total = float(br.total)
        br.alpha = float(br.alpha)
    else:
        br.total = br.mano if br.img is None else br.mano + br.img
    print(json.dumps(br.as_dict(), indent=2))
    return EXIT_OK


def _object_surface(path):
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return io.load_obj(path)
    if suffix == ".ply":
        return io.load_gaussian_ply(path).positions
    if suffix == ".npy":
        return np.load(path)
    raise SplatGraspError(f"{path}: object surface must be .obj, .ply or .npy")


def cmd_grasp_check(args):
    cfg = _load_config(args) if args.config else None
    rig = cfg.load_rig() if cfg else io.load_bundled_rig()
    eps = args.contact_eps if args.contact_eps is not None else (cfg.contact_eps if cfg else 0.005)
    limit = (args.penetration_limit if args.penetration_limit is not None
             else (cfg.penetration_limit if cfg else 0.002))
    _, verts = pose_mesh(rig, io.load_pose(args.pose))
    report = finger_contacts(verts, rig, _object_surface(args.object_mesh), eps, limit)
    print(json.dumps(report.as_dict(), indent=2))
    return EXIT_OK if report.success else EXIT_NOT_CONVERGED


def cmd_decode_heatmap(args):
    path = Path(args.input)
    maps = np.load(path) if path.suffix.lower() == ".npy" else np.asarray(io._read_json(path), dtype=float)
    if maps.ndim != 3 or maps.shape[0] != NUM_JOINTS:
        raise StructuralError(f"{path}: expected {NUM_JOINTS} heatmaps of shape T x E, got {maps.shape}")
    uv = soft_argmax(HeatmapStack(maps, args.beta))
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["joint", "u", "v"])
    for j, (u, v) in enumerate(uv):
        w.writerow([j, repr(float(u)), repr(float(v))])
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_demo(args):
    from .demo import write_demo_project

    cfg = write_demo_project(args.out, size=args.size, views=args.views,
                             seed=0 if args.seed is None else args.seed)
    print(f"wrote demo project -> {cfg}")
    return EXIT_OK


def build_parser():
    p = _Parser(prog="splatgrasp", description="Articulated Gaussian-splat hand rendering and pose refinement.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--seed", type=int, default=None)
        sp.set_defaults(func=func)
        return sp

    sp = add("bind", cmd_bind, "bind hand Gaussians to rig faces")
    sp.add_argument("--rig", help="rig JSON (default: bundled toy rig)")
    sp.add_argument("--hand-ply", required=True)
    sp.add_argument("--out", required=True)

    sp = add("render", cmd_render, "render the posed hand and object from one camera")
    sp.add_argument("--config", required=True)
    sp.add_argument("--pose", required=True)
    sp.add_argument("--camera-index", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("refine", cmd_refine, "refine a hand pose against target images")
    sp.add_argument("--config", required=True)
    sp.add_argument("--init-pose", required=True)
    sp.add_argument("--out", required=True, help="report JSON; figures and CSV are written next to it")
    sp.add_argument("--max-iterations", type=int)

    sp = add("loss", cmd_loss, "evaluate the training losses between two poses")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--rig")
    sp.add_argument("--config")
    sp.add_argument("--epoch", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--img-loss", type=float)
    sp.add_argument("--rendered")
    sp.add_argument("--target")

    sp = add("grasp-check", cmd_grasp_check, "geometric grasp-success check")
    sp.add_argument("--config")
    sp.add_argument("--pose", required=True)
    sp.add_argument("--object-mesh", required=True, help=".obj mesh, Gaussian .ply or .npy point set")
    sp.add_argument("--contact-eps", type=float)
    sp.add_argument("--penetration-limit", type=float)

    sp = add("decode-heatmap", cmd_decode_heatmap, "soft-argmax keypoints from 21 heatmaps")
    sp.add_argument("--in", dest="input", required=True, help=".npy or JSON array of shape (21, T, E)")
    sp.add_argument("--beta", type=float, default=1.0)
    sp.add_argument("--out")
    sp = add("demo", cmd_demo, "write a synthetic project to try the other commands")
    sp.add_argument("--out", required=True, help="directory to create")
    sp.add_argument("--size", type=int, default=128)
    sp.add_argument("--views", type=int, default=4)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SplatGraspError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
