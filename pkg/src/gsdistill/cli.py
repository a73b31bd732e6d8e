"""Command-line entry point: retrieve / optimize / render / eval.

Exit codes are a stable contract: 0 success, 2 configuration or input
error, 3 numerical abort (non-finite loss).  All randomness sits behind the
config seed, so every command is reproducible byte-for-byte.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

import numpy as np

from .config import (CATALOG_ENV, default_run_config, load_run_config,
                     write_resolved_config)
from .errors import ConfigError, GsdistillError, NonFiniteLossError
from .evaluation import metrics_report, janus_proxy, silhouette_iou
from .ply import load_reference_asset, read_scene_ply
from .pngio import write_depth_png, write_rgb_png
from .renderer import RenderOptions, render
from .retrieval import load_catalog, retrieve
from .scene import camera_from_angles, init_from_pointcloud
from .training import run_pipeline

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _resolve_asset_path(catalog_path: str, entry_path: str) -> str:
    if os.path.isabs(entry_path) or os.path.exists(entry_path):
        return entry_path
    return os.path.join(os.path.dirname(os.path.abspath(catalog_path)), entry_path)


def _catalog_path(arg: Optional[str]) -> str:
    if arg:
        return arg
    env = os.environ.get(CATALOG_ENV, "")
    if env:
        return env
    raise ConfigError(f"no catalog given (use --catalog or set ${CATALOG_ENV})")


def cmd_retrieve(args) -> int:
    catalog_path = _catalog_path(args.catalog)
    catalog = load_catalog(catalog_path)
    result = retrieve(args.prompt, catalog)
    if args.json:
        print(json.dumps({
            "selected": result.entry.path, "caption": result.entry.caption,
            "ranking": [[i, s] for i, s in result.ranking]}, sort_keys=True))
    else:
        for i, sim in result.ranking:
            e = catalog.entries[i]
            print(f"{sim:8.4f}  {e.path}  ({e.caption})")
    return EXIT_OK


def cmd_optimize(args) -> int:
    overrides = {"seed": args.seed, "threads": args.threads}
    config = load_run_config(args.config, overrides)
    catalog_path = config.resolved_catalog()
    catalog = load_catalog(catalog_path)
    result = retrieve(config.prompt, catalog)
    asset_path = _resolve_asset_path(catalog_path, result.entry.path)
    asset = load_reference_asset(asset_path)
    out_dir = config.output
    os.makedirs(out_dir, exist_ok=True)
    write_resolved_config(config, out_dir)
    print(f"retrieved: {result.entry.path} ({result.entry.caption})")
    if args.dry_run:
        scene = init_from_pointcloud(asset, config.init_count, config.init_opacity)
        camera = camera_from_angles(0.0, np.deg2rad(15.0), 3.0,
                                    width=config.geometry.camera.width,
                                    height=config.geometry.camera.height)
        img = render(scene, camera, config.geometry.background,
                     RenderOptions(threads=config.threads))
        write_rgb_png(os.path.join(out_dir, "dry_run.png"), img.rgb)
        print(f"dry run ok: {out_dir}/dry_run.png")
        return EXIT_OK
    scene, metrics = run_pipeline(asset, config.to_pipeline(), out_dir,
                                  resume=args.resume)
    print(f"finished {len(metrics)} logged steps; scene: "
          f"{out_dir}/scene_final.ply ({len(scene)} gaussians)")
    return EXIT_OK


def cmd_render(args) -> int:
    scene = read_scene_ply(args.scene)
    options = RenderOptions(threads=args.threads)
    background = (0.0, 0.0, 0.0)
    common = dict(fov_y=float(np.deg2rad(args.fov_deg)), width=args.width,
                  height=args.height, near=args.near, far=args.far)
    os.makedirs(args.out_dir, exist_ok=True)
    if args.turntable > 0:
        for i in range(args.turntable):
            deg = 360.0 * i / args.turntable
            camera = camera_from_angles(float(np.deg2rad(deg)),
                                        float(np.deg2rad(args.elevation_deg)),
                                        args.radius, **common)
            img = render(scene, camera, background, options)
            name = f"turn_{i:02d}_az{deg:05.1f}.png"
            write_rgb_png(os.path.join(args.out_dir, name), img.rgb)
        print(f"wrote {args.turntable} frames to {args.out_dir}")
        return EXIT_OK
    camera = camera_from_angles(float(np.deg2rad(args.azimuth_deg)),
                                float(np.deg2rad(args.elevation_deg)),
                                args.radius, **common)
    img = render(scene, camera, background, options)
    rgb_path = os.path.join(args.out_dir, args.name)
    write_rgb_png(rgb_path, img.rgb)
    if args.depth:
        write_depth_png(os.path.splitext(rgb_path)[0] + "_depth.png", img.depth,
                        camera.near, camera.far)
    print(f"wrote {rgb_path}")
    return EXIT_OK


def _load_eval_reference(path: str):
    """Load the reference for eval: a Gaussian-scene PLY renders as a scene
    (so a scene evaluated against itself scores IoU 1.0), anything else
    loads as a reference point cloud."""
    try:
        return read_scene_ply(path)
    except ConfigError:
        return load_reference_asset(path)


def cmd_eval(args) -> int:
    scene = read_scene_ply(args.scene)
    asset = _load_eval_reference(args.asset)
    config = default_run_config()
    sweep = config.sweep
    options = RenderOptions(threads=args.threads)
    metrics = []
    if args.metrics and os.path.exists(args.metrics):
        with open(args.metrics) as fh:
            metrics = [json.loads(line) for line in fh if line.strip()]
    report_path = metrics_report(metrics, scene, asset, args.out_dir, sweep, options)
    if args.json:
        janus = janus_proxy(scene, asset, sweep, options)
        iou = silhouette_iou(scene, asset, sweep, options)
        print(json.dumps({"janus": janus.to_dict(), "iou": iou.to_dict()},
                         sort_keys=True))
    else:
        with open(report_path) as fh:
            sys.stdout.write(fh.read())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gsdistill",
        description="Gaussian-splat distillation: retrieval-guided text-to-3D "
                    "optimization with deterministic guidance oracles.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("retrieve", help="rank catalog assets for a prompt")
    p.add_argument("--prompt", required=True)
    p.add_argument("--catalog", default=None,
                   help=f"catalog JSONL (default: ${CATALOG_ENV})")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("optimize", help="run the two-stage optimization")
    p.add_argument("--config", required=True, help="YAML run config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--resume", action="store_true",
                   help="continue from the latest checkpoint in the output dir")
    p.add_argument("--dry-run", action="store_true",
                   help="validate config, render one frame, exit")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("render", help="render a scene PLY to PNG")
    p.add_argument("--scene", required=True)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--name", default="render.png")
    p.add_argument("--azimuth-deg", type=float, default=0.0)
    p.add_argument("--elevation-deg", type=float, default=15.0)
    p.add_argument("--radius", type=float, default=3.0)
    p.add_argument("--fov-deg", type=float, default=40.0)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--near", type=float, default=0.1)
    p.add_argument("--far", type=float, default=100.0)
    p.add_argument("--depth", action="store_true", help="also write a 16-bit depth PNG")
    p.add_argument("--turntable", type=int, default=0,
                   help="render N evenly spaced azimuths instead of one view")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="evaluate a scene against a reference asset")
    p.add_argument("--scene", required=True)
    p.add_argument("--asset", required=True)
    p.add_argument("--out-dir", default="eval_out")
    p.add_argument("--metrics", default=None, help="metrics.jsonl from a run")
    p.add_argument("--json", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GsdistillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
