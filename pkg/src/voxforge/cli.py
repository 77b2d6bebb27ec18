"""Command-line pipeline driver.

Subcommands mirror the reconstruction stages::

    synth    generate a synthetic scene directory (images, priors, cameras)
    init     align priors and build one LOD octree per view
    fuse     fuse the per-view octrees into one
    opacity  TSDF fusion + opacity initialization of the fused octree
    render   render color/depth/normal rasters from an octree
    refine   compute a refined depth map for one view
    train    per-scene optimization
    mesh     extract a triangle mesh (rendered-depth TSDF, or density iso)
    eval     Chamfer distance of a mesh/octree against the analytic surface

Global options: ``--config FILE`` (key=value overrides), ``--seed N``,
``--threads N`` (capacity hint; the implementation is vectorized and
deterministic, so outputs never depend on it; falls back to the
VOXFORGE_THREADS environment variable).

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import fusion, meshing, svo, synthetic
from .camera import load_cameras, save_cameras, umeyama_align
from .config import load_config, opacity_mapping_from, train_config_from
from .errors import DataFormatError, NumericalError
from .optimize import format_trace, train
from .priors import align_prior, load_prior, save_prior
from .rasters import save_float_raster, save_ppm
from .refine import refine_depth, save_refined
from .render import RenderConfig, render_view
from .tsdf_opacity import initialize_opacity


def _scene_paths(d):
    return {
        "spec": os.path.join(d, "scene.txt"),
        "cams_gt": os.path.join(d, "cameras_gt.txt"),
        "cams_est": os.path.join(d, "cameras_est.txt"),
        "cams_aligned": os.path.join(d, "cameras_aligned.txt"),
        "fused": os.path.join(d, "fused.svo"),
        "initialized": os.path.join(d, "initialized.svo"),
        "trained": os.path.join(d, "trained.svo"),
        "trace": os.path.join(d, "trace.txt"),
        "mesh": os.path.join(d, "mesh.obj"),
        "eval": os.path.join(d, "eval.txt"),
    }


def _load_scene(d):
    p = _scene_paths(d)
    spec = synthetic.load_scene_spec(p["spec"])
    cams_gt = load_cameras(p["cams_gt"])
    cams_est = load_cameras(p["cams_est"])
    images = [
        _load_raster_checked(os.path.join(d, f"image_{i:03d}.img"))
        for i in range(spec.n_views)
    ]
    priors = [load_prior(d, i, cams_est[i]) for i in range(spec.n_views)]
    return spec, cams_gt, images, priors


def _load_raster_checked(path):
    from .rasters import load_float_raster

    if not os.path.exists(path):
        raise DataFormatError(f"missing raster {path}")
    return load_float_raster(path)


def _aligned_priors(spec, cams_gt, priors):
    est_centers = np.array([p.camera.center for p in priors])
    gt_centers = np.array([c.center for c in cams_gt])
    transform = umeyama_align(est_centers, gt_centers)
    return [align_prior(p, transform) for p in priors], transform


def cmd_synth(args, cfg_values):
    spec = synthetic.SceneSpec(
        shape=args.shape,
        n_views=args.views,
        width=args.size[0],
        height=args.size[1],
        noise=args.noise,
        pose_perturb=args.pose_perturb,
        rig=args.rig,
        seed=args.seed,
    )
    scene = synthetic.generate_scene(spec)
    os.makedirs(args.out, exist_ok=True)
    p = _scene_paths(args.out)
    synthetic.save_scene_spec(p["spec"], spec)
    save_cameras(p["cams_gt"], scene.cameras)
    save_cameras(p["cams_est"], [pr.camera for pr in scene.priors])
    for i in range(spec.n_views):
        save_float_raster(os.path.join(args.out, f"image_{i:03d}.img"), scene.images[i])
        save_ppm(os.path.join(args.out, f"image_{i:03d}.ppm"), scene.images[i])
        save_float_raster(
            os.path.join(args.out, f"gt_depth_{i:03d}.img"),
            np.nan_to_num(scene.gt_depths[i], nan=0.0),
        )
        save_prior(args.out, i, scene.priors[i])
    print(f"wrote scene ({spec.shape}, {spec.n_views} views) to {args.out}")
    return 0


def cmd_init(args, cfg_values):
    spec, cams_gt, images, priors = _load_scene(args.scene)
    aligned, transform = _aligned_priors(spec, cams_gt, priors)
    save_cameras(
        _scene_paths(args.scene)["cams_aligned"], [p.camera for p in aligned]
    )
    center = np.asarray(spec.center, dtype=np.float64)
    size = synthetic.default_scene_size(spec)
    level_max = cfg_values.get("init.level_max", 8)
    merge_t = cfg_values.get("init.merge_threshold", 0.0)
    total = 0
    for i, prior in enumerate(aligned):
        tree = svo.lod_unproject(
            prior.camera,
            prior,
            center,
            size,
            merge_threshold=merge_t,
            level_max=level_max,
            image=images[i],
        )
        svo.save_octree(os.path.join(args.scene, f"init_{i:03d}.svo"), tree)
        total += len(tree)
    print(
        f"built {spec.n_views} per-view octrees ({total} voxels, "
        f"alignment scale {transform.s:.6g})"
    )
    return 0


def cmd_fuse(args, cfg_values):
    spec = synthetic.load_scene_spec(_scene_paths(args.scene)["spec"])
    trees = []
    for i in range(spec.n_views):
        path = os.path.join(args.scene, f"init_{i:03d}.svo")
        if not os.path.exists(path):
            raise DataFormatError(f"missing per-view octree {path}; run init first")
        trees.append(svo.load_octree(path))
    fused = fusion.fuse(trees)
    svo.save_octree(_scene_paths(args.scene)["fused"], fused)
    print(f"fused {len(trees)} octrees -> {len(fused)} voxels")
    return 0


def cmd_opacity(args, cfg_values):
    p = _scene_paths(args.scene)
    if not os.path.exists(p["fused"]):
        raise DataFormatError(f"missing fused octree {p['fused']}; run fuse first")
    fused = svo.load_octree(p["fused"])
    spec, cams_gt, images, priors = _load_scene(args.scene)
    aligned, _ = _aligned_priors(spec, cams_gt, priors)
    mapping = opacity_mapping_from(cfg_values)
    tree, _ = initialize_opacity(
        fused,
        aligned,
        mapping=mapping,
        d_trunc=cfg_values.get("tsdf.trunc"),
        augment_level=cfg_values.get("augment.level"),
        alpha_min=cfg_values.get("opacity.alpha_min", 0.01),
        alpha_max=cfg_values.get("opacity.alpha_max", 0.99),
        tau_prune=cfg_values.get("opacity.tau_prune", 0.05),
    )
    svo.save_octree(p["initialized"], tree)
    print(f"opacity initialization: {len(fused)} fused -> {len(tree)} voxels kept")
    return 0


def cmd_render(args, cfg_values):
    if not os.path.exists(args.octree):
        raise DataFormatError(f"missing octree {args.octree}")
    tree = svo.load_octree(args.octree)
    cams = load_cameras(args.cameras)
    os.makedirs(args.out, exist_ok=True)
    views = [args.view] if args.view is not None else range(len(cams))
    for i in views:
        out = render_view(tree, cams[i], RenderConfig())
        base = os.path.join(args.out, f"render_{i:03d}")
        save_float_raster(base + "_color.img", out.color)
        save_ppm(base + "_color.ppm", out.color)
        save_float_raster(base + "_depth.img", np.nan_to_num(out.depth, nan=0.0))
        save_float_raster(base + "_normal.img", out.normal)
    print(f"rendered {len(list(views))} views to {args.out}")
    return 0


def cmd_refine(args, cfg_values):
    spec, cams_gt, images, priors = _load_scene(args.scene)
    octree_path = args.octree or _scene_paths(args.scene)["trained"]
    if not os.path.exists(octree_path):
        raise DataFormatError(f"missing octree {octree_path}")
    tree = svo.load_octree(octree_path)
    rcfg = RenderConfig()
    depths = []
    for cam in cams_gt:
        view = render_view(tree, cam, rcfg)
        depths.append(np.where(view.depth_valid, view.depth, np.nan))
    refined = refine_depth(
        args.view,
        cams_gt,
        images,
        depths,
        k=min(cfg_values.get("refine.K", 4), spec.n_views - 1),
        n_rand=cfg_values.get("refine.n_rand", 16),
        s=cfg_values.get("refine.s", 0.04),
        reproj_thresh=cfg_values.get("refine.reproj_thresh", 1.0),
        seed=args.seed,
    )
    base = os.path.join(args.scene, f"refined_{args.view:03d}")
    save_refined(base, refined)
    print(
        f"refined view {args.view}: {int(refined.valid.sum())} valid pixels -> {base}.img"
    )
    return 0


def cmd_train(args, cfg_values):
    p = _scene_paths(args.scene)
    spec, cams_gt, images, priors = _load_scene(args.scene)
    octree_path = args.octree or p["initialized"]
    if not os.path.exists(octree_path):
        raise DataFormatError(f"missing octree {octree_path}; run opacity first")
    tree = svo.load_octree(octree_path)
    cfg = train_config_from(cfg_values, seed=args.seed)
    if args.iters is not None:
        from dataclasses import replace

        cfg = replace(cfg, iters=args.iters)
    result = train(tree, cams_gt, images, cfg)
    svo.save_octree(p["trained"], result.tree)
    with open(p["trace"], "w") as f:
        f.write(format_trace(result.trace, result.voxel_counts))
    last = result.trace[-1] if result.trace else None
    msg = f"trained {cfg.iters} iterations -> {len(result.tree)} voxels"
    if last:
        msg += f", final total loss {last.total:.6g}"
    print(msg)
    return 0


def cmd_mesh(args, cfg_values):
    p = _scene_paths(args.scene)
    octree_path = args.octree or p["trained"]
    if not os.path.exists(octree_path):
        raise DataFormatError(f"missing octree {octree_path}")
    tree = svo.load_octree(octree_path)
    cams = load_cameras(p["cams_gt"])
    mesh = meshing.extract_mesh(
        tree,
        cams,
        resolution=cfg_values.get("mesh.resolution", args.resolution),
        from_density=args.from_density,
    )
    out = args.out or p["mesh"]
    meshing.save_obj(out, mesh)
    print(f"extracted mesh: {len(mesh.vertices)} vertices, {len(mesh)} triangles -> {out}")
    return 0


def cmd_eval(args, cfg_values):
    p = _scene_paths(args.scene)
    spec = synthetic.load_scene_spec(p["spec"])
    if args.mesh:
        mesh = meshing.load_obj(args.mesh)
    else:
        octree_path = args.octree or p["trained"]
        if not os.path.exists(octree_path):
            raise DataFormatError(f"missing octree {octree_path}")
        tree = svo.load_octree(octree_path)
        cams = load_cameras(p["cams_gt"])
        mesh = meshing.extract_mesh(tree, cams, resolution=args.resolution)
    if len(mesh) == 0:
        raise NumericalError("extracted mesh is empty")
    mesh_pts = meshing.sample_mesh_points(mesh, args.samples, seed=args.seed)
    gt_pts = synthetic.sample_surface(spec, args.samples, seed=args.seed + 1)
    cd = meshing.chamfer_distance(mesh_pts, gt_pts)
    line = f"chamfer_distance {cd:.17g}\n"
    with open(p["eval"], "w") as f:
        f.write(line)
    print(line.strip())
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="voxforge",
        description="Sparse-voxel surface reconstruction pipeline (CPU).",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, default=0, help="global RNG seed")
    common.add_argument(
        "--threads",
        type=int,
        default=None,
        help="parallelism hint (outputs never depend on it); "
        "default from VOXFORGE_THREADS",
    )

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic scene")
    p.add_argument("--shape", choices=["sphere", "plane", "boxes"], default="sphere")
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=16)
    p.add_argument("--size", type=_parse_size, default=(48, 48), help="WxH")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--pose-perturb", type=float, default=0.0)
    p.add_argument("--rig", choices=["ring", "hemisphere", "grid"], default="ring")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("init", parents=[common], help="per-view LOD octrees")
    p.add_argument("--scene", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("fuse", parents=[common], help="fuse per-view octrees")
    p.add_argument("--scene", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("opacity", parents=[common], help="TSDF opacity init")
    p.add_argument("--scene", required=True)
    p.set_defaults(func=cmd_opacity)

    p = sub.add_parser("render", parents=[common], help="render views")
    p.add_argument("--octree", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--view", type=int, default=None)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("refine", parents=[common], help="refined depth for a view")
    p.add_argument("--scene", required=True)
    p.add_argument("--octree", default=None)
    p.add_argument("--view", type=int, required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("train", parents=[common], help="per-scene optimization")
    p.add_argument("--scene", required=True)
    p.add_argument("--octree", default=None)
    p.add_argument("--iters", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("mesh", parents=[common], help="extract a mesh")
    p.add_argument("--scene", required=True)
    p.add_argument("--octree", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--from-density", action="store_true")
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("eval", parents=[common], help="Chamfer vs analytic surface")
    p.add_argument("--scene", required=True)
    p.add_argument("--mesh", default=None)
    p.add_argument("--octree", default=None)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--samples", type=int, default=20000)
    p.set_defaults(func=cmd_eval)

    return parser


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, _, h = text.partition("x")
        return int(w), int(h)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad size {text!r}, expected WxH") from e


def _resolve_threads(value):
    if value is None:
        value = os.environ.get("VOXFORGE_THREADS", "1")
    n = int(value)
    if n < 1:
        raise DataFormatError("--threads must be at least 1")
    return n


def cli(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        _resolve_threads(args.threads)
        cfg_values = load_config(args.config) if args.config else {}
        return args.func(args, cfg_values)
    except (DataFormatError, FileNotFoundError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
