"""Deterministic toy reference assets and scene constructions for tests,
demos, and the evaluation A/B pairs.

All generators are closed-form (no rng), centered at the origin, and scaled
to a unit bounding radius, so downstream runs are bit-reproducible.  Run
``python -m gsdistill.assets OUTDIR`` to materialize the toy catalog
(sphere/cube/figure PLYs plus catalog.jsonl) for the CLI walkthrough.
"""

from __future__ import annotations

import os
import sys

import numpy as np

from .errors import ConfigError
from .ply import write_pointcloud_ply
from .scene import GaussianScene, ReferenceAsset

SPHERE_COLOR = (0.75, 0.30, 0.25)
CUBE_COLOR = (0.25, 0.45, 0.80)
FIGURE_COLOR = (0.80, 0.65, 0.30)


def fibonacci_sphere(n: int, radius: float = 1.0) -> np.ndarray:
    """n near-uniform points on a sphere via the golden-angle spiral."""
    if n < 1:
        raise ConfigError("need at least one point")
    i = np.arange(n, dtype=np.float64)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return radius * np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def sphere_asset(n: int = 2048, color=SPHERE_COLOR,
                 caption: str = "a plain red sphere") -> ReferenceAsset:
    pts = fibonacci_sphere(n)
    colors = np.tile(np.asarray(color, dtype=np.float64), (n, 1))
    return ReferenceAsset(points=pts, colors=colors, caption=caption).normalized()


def cube_asset(n: int = 2048, color=CUBE_COLOR,
               caption: str = "a plain blue cube") -> ReferenceAsset:
    """Points on the surface of an axis-aligned cube (grid per face)."""
    g = max(2, int(np.ceil(np.sqrt(n / 6.0))))
    u = np.linspace(-1.0, 1.0, g)
    uu, vv = np.meshgrid(u, u, indexing="ij")
    uu, vv = uu.ravel(), vv.ravel()
    ones = np.ones_like(uu)
    faces = [
        np.stack([ones, uu, vv], axis=1), np.stack([-ones, uu, vv], axis=1),
        np.stack([uu, ones, vv], axis=1), np.stack([uu, -ones, vv], axis=1),
        np.stack([uu, vv, ones], axis=1), np.stack([uu, vv, -ones], axis=1),
    ]
    pts = np.concatenate(faces, axis=0)
    colors = np.tile(np.asarray(color, dtype=np.float64), (pts.shape[0], 1))
    return ReferenceAsset(points=pts, colors=colors, caption=caption).normalized()


def figure_asset(n: int = 2048, color=FIGURE_COLOR,
                 caption: str = "a standing figure with an offset head") -> ReferenceAsset:
    """Azimuth-asymmetric body-plus-head blob: the head sits off-axis so the
    silhouette clearly distinguishes front from back views."""
    n_body = (2 * n) // 3
    n_head = n - n_body
    body = fibonacci_sphere(n_body, radius=0.62)
    head = fibonacci_sphere(n_head, radius=0.34) + np.array([0.55, 0.0, 0.40])
    pts = np.concatenate([body, head], axis=0)
    colors = np.tile(np.asarray(color, dtype=np.float64), (pts.shape[0], 1))
    return ReferenceAsset(points=pts, colors=colors, caption=caption).normalized()


def mirror_scene_x(scene: GaussianScene) -> GaussianScene:
    """The scene unioned with its x-mirrored copy — the synthetic "two-faced"
    construction: canonical features appear on both sides."""
    means = scene.means.copy()
    means[:, 0] *= -1.0
    quats = scene.quats.copy()
    quats[:, 2] *= -1.0   # conjugate the rotation by diag(-1, 1, 1)
    quats[:, 3] *= -1.0
    return GaussianScene(
        means=np.concatenate([scene.means, means]),
        log_scales=np.concatenate([scene.log_scales, scene.log_scales.copy()]),
        quats=np.concatenate([scene.quats, quats]),
        logit_opacities=np.concatenate([scene.logit_opacities,
                                        scene.logit_opacities.copy()]),
        colors=np.concatenate([scene.colors, scene.colors.copy()]),
    )


def write_toy_catalog(out_dir: str) -> str:
    """Write the toy assets and a catalog.jsonl referencing them; returns the
    catalog path."""
    import json

    os.makedirs(out_dir, exist_ok=True)
    entries = [
        ("sphere.ply", sphere_asset()),
        ("cube.ply", cube_asset()),
        ("figure.ply", figure_asset()),
    ]
    catalog_path = os.path.join(out_dir, "catalog.jsonl")
    with open(catalog_path, "w") as fh:
        for name, asset in entries:
            path = os.path.join(out_dir, name)
            write_pointcloud_ply(path, asset.points, asset.colors)
            fh.write(json.dumps({"path": path, "caption": asset.caption}) + "\n")
    return catalog_path


if __name__ == "__main__":
    target = sys.argv[1] if len(sys.argv) > 1 else "toy_assets"
    print(write_toy_catalog(target))
