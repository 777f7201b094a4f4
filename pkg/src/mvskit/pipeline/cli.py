"""Command-line interface.

Subcommands: synth, tuples, depth, fuse, eval-depth, eval-mesh.
Exit codes: 0 success, 1 partial failures (some tuples failed but the
run completed), 2 configuration or format errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..costvolume import ConfigurationError, MlpFormatError
from ..depthestimate import DepthFormatError, NoMatchableContentError
from ..evaluation import depth_report
from ..features import FeatureFormatError
from ..fusion import (
    PlyFormatError,
    fscore_at_threshold,
    load_ply,
    mesh_distance_metrics,
    sample_surface_points,
    write_ply,
)
from .manifest import ManifestError, load_scene
from .run import (
    PipelineConfig,
    RunDepthResult,
    fuse_depth_maps,
    gt_at_feature_grid,
    load_depth_dir,
    run_depth,
)
from .synth import SCENE_KINDS, SynthConfig, synth_scene, write_scene
from .tuples import (
    OverlapTupleConfig,
    PoseTupleConfig,
    load_tuples,
    select_tuples_overlap,
    select_tuples_pose,
    write_tuples,
)

CONFIG_ERRORS = (
    ManifestError,
    ConfigurationError,
    MlpFormatError,
    DepthFormatError,
    FeatureFormatError,
    PlyFormatError,
    ValueError,
)


def _cmd_synth(args: argparse.Namespace) -> int:
    cfg = SynthConfig(width=args.width, height=args.height)
    scene = synth_scene(args.kind, args.frames, noise_seed=args.seed, cfg=cfg)
    manifest_path = write_scene(scene, args.out)
    if args.figures:
        from .figures import save_scene_overview

        save_scene_overview(
            Path(args.out) / "overview.png",
            {f.id: f.image.data[:, :, 0] for f in scene.frames},
        )
    print(f"wrote {len(scene.frames)} frames to {manifest_path}")
    return 0


def _cmd_tuples(args: argparse.Namespace) -> int:
    from .manifest import load_manifest

    manifest = load_manifest(args.scene)
    if args.mode == "pose":
        selection = select_tuples_pose(manifest, PoseTupleConfig(max_sources=args.max_sources))
    else:
        selection = select_tuples_overlap(
            manifest, OverlapTupleConfig(max_sources=args.max_sources)
        )
    write_tuples(selection, args.out)
    print(
        f"selected {len(selection.tuples)} tuples "
        f"({len(selection.skipped)} references skipped) -> {args.out}"
    )
    return 0


def _report_outputs(result: RunDepthResult, out_dir: Path, figures: bool) -> None:
    if result.report is None:
        return
    result.report.save_json(out_dir / "report.json")
    table = result.report.format_table()
    (out_dir / "report.txt").write_text(table + "\n")
    print(table)
    if figures:
        from .figures import save_report_figure

        save_report_figure(result.report, out_dir / "report.png")


def _cmd_depth(args: argparse.Namespace) -> int:
    config = PipelineConfig.from_json(args.config) if args.config else PipelineConfig()
    config_dir = Path(args.config).parent if args.config else None
    _, frames = load_scene(args.scene)
    selection = load_tuples(args.tuples)
    out_dir = Path(args.out)
    result = run_depth(
        frames,
        selection.tuples,
        config,
        out_dir=out_dir,
        write_png=args.png,
        figures=args.figures,
        config_dir=config_dir,
    )
    _report_outputs(result, out_dir, args.figures)
    print(f"estimated depth for {len(result.depth_maps)} of {len(selection.tuples)} tuples")
    for failure in result.failures:
        print(f"  failed {failure.reference}: {failure.error}", file=sys.stderr)
    return 1 if result.failures else 0


def _cmd_fuse(args: argparse.Namespace) -> int:
    _, frames = load_scene(args.scene)
    depth_maps = load_depth_dir(args.depth_dir, [f.id for f in frames])
    if not depth_maps:
        raise ManifestError(f"no .mvsd depth maps found in {args.depth_dir}")
    mesh = fuse_depth_maps(
        frames,
        depth_maps,
        voxel_size=args.voxel,
        truncation=args.trunc,
        max_fuse_depth=args.max_depth,
    )
    write_ply(mesh, args.out, binary=not args.ascii)
    print(
        f"fused {len(depth_maps)} depth maps -> {args.out} "
        f"({len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles)"
    )
    return 0


def _cmd_eval_depth(args: argparse.Namespace) -> int:
    _, frames = load_scene(args.scene)
    depth_maps = load_depth_dir(args.pred_dir, [f.id for f in frames])
    if not depth_maps:
        raise ManifestError(f"no .mvsd depth maps found in {args.pred_dir}")
    pairs = []
    ids = []
    for frame in frames:
        dm = depth_maps.get(frame.id)
        if dm is None or frame.gt_depth is None:
            continue
        if (dm.width, dm.height) == (frame.gt_depth.width, frame.gt_depth.height):
            gt = frame.gt_depth
        else:
            scale = frame.intrinsics.width // dm.width
            gt = gt_at_feature_grid(frame, dm.width, dm.height, scale)
        pairs.append((dm, gt))
        ids.append(frame.id)
    if not pairs:
        raise ManifestError("no (prediction, GT) pairs to evaluate")
    report = depth_report(pairs, ids=ids)
    report.save_json(args.report)
    table = report.format_table()
    report_path = Path(args.report)
    report_path.with_suffix(".txt").write_text(table + "\n")
    print(table)
    if args.figures:
        from .figures import save_report_figure

        save_report_figure(report, report_path.with_suffix(".png"))
    return 0


def _cmd_eval_mesh(args: argparse.Namespace) -> int:
    pred = load_ply(args.pred)
    gt = load_ply(args.gt)
    if pred.is_empty or gt.is_empty:
        raise PlyFormatError("both meshes must be non-empty for evaluation")
    dist = mesh_distance_metrics(pred, gt)
    acc, comp = dist.accuracy, dist.completion
    labels = ("accuracy", "completion")
    if args.swap_acc_comp:
        acc, comp = comp, acc
        labels = ("accuracy(swapped)", "completion(swapped)")
    # Same seed on both meshes: identical inputs then sample identically
    # and score a perfect F=1.
    pred_pts = sample_surface_points(pred, args.samples, seed=args.seed)
    gt_pts = sample_surface_points(gt, args.samples, seed=args.seed)
    precision, recall, fscore = fscore_at_threshold(pred_pts, gt_pts, args.thresh)
    metrics = {
        labels[0]: acc,
        labels[1]: comp,
        "chamfer": dist.chamfer,
        "precision": precision,
        "recall": recall,
        "fscore": fscore,
        "threshold": args.thresh,
        "samples": args.samples,
    }
    for key, value in metrics.items():
        print(f"{key:>20}: {value:.6f}" if isinstance(value, float) else f"{key:>20}: {value}")
    if args.report:
        Path(args.report).write_text(json.dumps(metrics, indent=2))
    if args.figures:
        from scipy.spatial import cKDTree

        from .figures import save_mesh_distance_figure

        d_pred, _ = cKDTree(gt_pts).query(pred_pts, k=1)
        d_gt, _ = cKDTree(pred_pts).query(gt_pts, k=1)
        out = Path(args.report or args.pred).with_suffix(".png")
        save_mesh_distance_figure(d_pred, d_gt, args.thresh, out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvskit",
        description="Plane-sweep multi-view stereo with adaptive depth ranges",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic scene with GT depth")
    p.add_argument("--kind", choices=SCENE_KINDS, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=192)
    p.add_argument("--figures", action="store_true", help="write a contact sheet")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("tuples", help="select reference/source tuples")
    p.add_argument("--scene", required=True, help="scene manifest JSON")
    p.add_argument("--mode", choices=("pose", "overlap"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-sources", type=int, default=8)
    p.set_defaults(func=_cmd_tuples)

    p = sub.add_parser("depth", help="estimate depth for every tuple")
    p.add_argument("--scene", required=True)
    p.add_argument("--tuples", required=True)
    p.add_argument("--config", default=None, help="PipelineConfig JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--png", action="store_true", help="also write 16-bit depth PNGs")
    p.add_argument("--figures", action="store_true", help="write preview figures")
    p.set_defaults(func=_cmd_depth)

    p = sub.add_parser("fuse", help="fuse depth maps into a mesh")
    p.add_argument("--scene", required=True)
    p.add_argument("--depth-dir", required=True)
    p.add_argument("--voxel", type=float, default=0.04)
    p.add_argument("--trunc", type=float, default=None)
    p.add_argument("--max-depth", type=float, default=3.5)
    p.add_argument("--out", required=True)
    p.add_argument("--ascii", action="store_true", help="write ASCII PLY")
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("eval-depth", help="depth metrics against scene GT")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--report", required=True, help="output JSON path")
    p.add_argument("--figures", action="store_true")
    p.set_defaults(func=_cmd_eval_depth)

    p = sub.add_parser("eval-mesh", help="mesh distance and F-score metrics")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--swap-acc-comp", action="store_true",
                   help="swap the accuracy/completion labels to the conventional reading")
    p.add_argument("--samples", type=int, default=200000)
    p.add_argument("--thresh", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default=None, help="optional JSON output")
    p.add_argument("--figures", action="store_true")
    p.set_defaults(func=_cmd_eval_mesh)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NoMatchableContentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
