"""Geometric-consistency evaluation: multi-view sweeps, a measurable
stand-in for the multi-face/content-drift/thin-structure failure modes, and
silhouette metrics, plus the end-of-run report with figures.

The inconsistency proxy renders an azimuth sweep, takes Hu invariants of
each view's silhouette, log-compresses them (Hu magnitudes span orders of
magnitude), and scores shape dispersion as the mean pairwise L2 distance.
The reported ratio normalizes by the reference asset's own dispersion under
the identical sweep; a scene is flagged when the ratio or the thin-structure
score crosses its configured threshold.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, DegenerateImageError
from .moments import hu_invariants
from .pngio import write_rgb_png
from .renderer import (DEFAULT_OPTIONS, RenderedImage, RenderOptions, render,
                       render_reference)
from .scene import CameraPose, GaussianScene, ReferenceAsset, camera_from_angles
from .training import MA_WINDOW, moving_average

LOG_EPS = 1e-12
RATIO_EPS = 1e-9


@dataclass
class SweepConfig:
    n_views: int = 8
    elevation_deg: float = 15.0
    radius: float = 3.0
    start_azimuth_deg: float = 0.0
    width: int = 64
    height: int = 64
    fov_y_deg: float = 40.0
    near: float = 0.1
    far: float = 100.0
    background: tuple = (0.0, 0.0, 0.0)
    silhouette_threshold: float = 0.5
    ratio_flag: float = 2.0
    thin_flag: float = 0.25
    thin_fraction: float = 0.2

    def __post_init__(self):
        if self.n_views < 2:
            raise ConfigError("sweep needs at least 2 views")

    def cameras(self) -> List[CameraPose]:
        azimuths = np.deg2rad(self.start_azimuth_deg) \
            + 2.0 * np.pi * np.arange(self.n_views) / self.n_views
        return [camera_from_angles(float(a), float(np.deg2rad(self.elevation_deg)),
                                   self.radius, fov_y=float(np.deg2rad(self.fov_y_deg)),
                                   width=self.width, height=self.height,
                                   near=self.near, far=self.far)
                for a in azimuths]


@dataclass
class ViewSweep:
    config: SweepConfig
    images: List[RenderedImage]

    @property
    def silhouettes(self) -> List[np.ndarray]:
        return [img.alpha > self.config.silhouette_threshold for img in self.images]


def render_sweep(subject, config: SweepConfig,
                 options: RenderOptions = DEFAULT_OPTIONS) -> ViewSweep:
    """Render the azimuth sweep of a GaussianScene or a ReferenceAsset."""
    images = []
    for camera in config.cameras():
        if isinstance(subject, ReferenceAsset):
            images.append(render_reference(subject, camera, config.background, options))
        else:
            images.append(render(subject, camera, config.background, options))
    return ViewSweep(config, images)


def log_compress(h: np.ndarray) -> np.ndarray:
    return np.sign(h) * np.log(np.abs(h) + LOG_EPS)


def silhouette_dispersion(sweep: ViewSweep) -> tuple[float, List[Optional[np.ndarray]]]:
    """Mean pairwise L2 distance between log-compressed Hu vectors of the
    non-blank silhouettes; blank views carry None and are skipped."""
    hus: List[Optional[np.ndarray]] = []
    for mask in sweep.silhouettes:
        if mask.sum() == 0:
            hus.append(None)
        else:
            hus.append(log_compress(hu_invariants(mask.astype(np.float64))))
    valid = [h for h in hus if h is not None]
    if not valid:
        raise DegenerateImageError("every view in the sweep rendered blank")
    if len(valid) == 1:
        return 0.0, hus
    dists = [float(np.linalg.norm(a - b))
             for k, a in enumerate(valid) for b in valid[k + 1:]]
    return float(np.mean(dists)), hus


@dataclass
class JanusReport:
    scene_dispersion: float
    reference_dispersion: float
    ratio: float
    thin_score: float
    flagged: bool
    scene_hu: List[Optional[np.ndarray]] = field(repr=False, default_factory=list)
    areas: List[int] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {"scene_dispersion": self.scene_dispersion,
                "reference_dispersion": self.reference_dispersion,
                "ratio": self.ratio, "thin_score": self.thin_score,
                "flagged": self.flagged, "areas": self.areas}


def thin_structure_score(sweep: ViewSweep, fraction: float) -> tuple[float, List[int]]:
    areas = [int(mask.sum()) for mask in sweep.silhouettes]
    median = float(np.median(areas))
    if median <= 0:
        return 1.0, areas
    thin = sum(1 for a in areas if a < fraction * median)
    return thin / len(areas), areas


def janus_proxy(scene: GaussianScene, asset: ReferenceAsset,
                config: SweepConfig = SweepConfig(),
                options: RenderOptions = DEFAULT_OPTIONS) -> JanusReport:
    scene_sweep = render_sweep(scene, config, options)
    ref_sweep = render_sweep(asset, config, options)
    scene_disp, scene_hu = silhouette_dispersion(scene_sweep)
    ref_disp, _ = silhouette_dispersion(ref_sweep)
    ratio = scene_disp / max(ref_disp, RATIO_EPS)
    thin, areas = thin_structure_score(scene_sweep, config.thin_fraction)
    flagged = bool(ratio > config.ratio_flag or thin > config.thin_flag)
    return JanusReport(scene_disp, ref_disp, ratio, thin, flagged, scene_hu, areas)


@dataclass
class IoUReport:
    per_view: List[Optional[float]]
    mean: float
    excluded_views: List[int]

    def to_dict(self) -> Dict:
        return {"per_view": self.per_view, "mean": self.mean,
                "excluded_views": self.excluded_views}


def silhouette_iou(scene: GaussianScene, asset: ReferenceAsset,
                   config: SweepConfig = SweepConfig(),
                   options: RenderOptions = DEFAULT_OPTIONS) -> IoUReport:
    """Per-view and mean IoU of scene-vs-reference silhouettes; views where
    both masks are empty are excluded and listed."""
    scene_sweep = render_sweep(scene, config, options)
    ref_sweep = render_sweep(asset, config, options)
    per_view: List[Optional[float]] = []
    excluded: List[int] = []
    for vi, (a, b) in enumerate(zip(scene_sweep.silhouettes, ref_sweep.silhouettes)):
        union = np.logical_or(a, b).sum()
        if union == 0:
            per_view.append(None)
            excluded.append(vi)
            continue
        per_view.append(float(np.logical_and(a, b).sum() / union))
    valid = [v for v in per_view if v is not None]
    mean = float(np.mean(valid)) if valid else 0.0
    return IoUReport(per_view, mean, excluded)


# ---------------------------------------------------------------------------
# report


def turntable_strip(scene: GaussianScene, config: SweepConfig,
                    options: RenderOptions = DEFAULT_OPTIONS) -> np.ndarray:
    sweep = render_sweep(scene, config, options)
    return np.concatenate([img.rgb for img in sweep.images], axis=1)


def _series(metrics: Sequence[Dict], key: str) -> tuple[list, list]:
    xs = [m["step"] for m in metrics if key in m]
    ys = [m[key] for m in metrics if key in m]
    return xs, ys


def _save_figure(fig, path):
    fig.savefig(path, dpi=100, metadata={"Software": "gsdistill"})


def metrics_report(metrics: Sequence[Dict], scene: Optional[GaussianScene],
                   asset: Optional[ReferenceAsset], out_dir: str,
                   sweep: SweepConfig = SweepConfig(),
                   options: RenderOptions = DEFAULT_OPTIONS) -> str:
    """Write report.txt, summary records, and figures; returns the report
    path.  Missing inputs degrade to 'absent' entries rather than errors."""
    os.makedirs(out_dir, exist_ok=True)
    lines = ["run report", "=" * 40]
    records: List[Dict] = []

    if metrics:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(7, 4))
        for key in ("control", "moment", "surrogate", "total"):
            xs, ys = _series(metrics, key)
            if xs:
                ax.plot(xs, ys, label=key, linewidth=1.0)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(loc="upper right")
        _save_figure(fig, os.path.join(out_dir, "loss_curves.png"))
        plt.close(fig)

        for key, fname in (("gaussians", "gaussian_count.png"), ("lora", "lora.png")):
            xs, ys = _series(metrics, key)
            fig, ax = plt.subplots(figsize=(7, 3))
            ax.plot(xs, ys, linewidth=1.0)
            ax.set_xlabel("step")
            ax.set_ylabel(key)
            _save_figure(fig, os.path.join(out_dir, fname))
            plt.close(fig)

        last = metrics[-1]
        lines.append(f"steps: {last['step']}")
        _xs, moments_ = _series(metrics, "moment")
        if moments_:
            early = moments_[:MA_WINDOW]
            lines.append(f"moment loss start MA: {moving_average(early):.6g}")
            lines.append(f"moment loss final MA: {moving_average(moments_):.6g}")
        _xs, lora = _series(metrics, "lora")
        if lora:
            lines.append(f"lora lambda: first {lora[0]:.6g} last {lora[-1]:.6g}")
        lines.append(f"gaussians: final {last.get('gaussians', 'absent')}")
        records.append({"metric": "steps", "value": last["step"]})
    else:
        lines.append("metrics: absent (empty run log)")

    if scene is not None and asset is not None:
        janus = janus_proxy(scene, asset, sweep, options)
        iou = silhouette_iou(scene, asset, sweep, options)
        lines.append(f"janus ratio: {janus.ratio:.6g} (flagged: {janus.flagged})")
        lines.append(f"scene dispersion: {janus.scene_dispersion:.6g}")
        lines.append(f"thin-structure score: {janus.thin_score:.6g}")
        lines.append(f"mean silhouette IoU: {iou.mean:.6g}")
        records.append({"metric": "janus", **janus.to_dict()})
        records.append({"metric": "iou", **iou.to_dict()})
        strip = turntable_strip(scene, sweep, options)
        write_rgb_png(os.path.join(out_dir, "turntable.png"), strip)
    else:
        lines.append("scene/asset metrics: absent")

    report_path = os.path.join(out_dir, "report.txt")
    with open(report_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(out_dir, "summary.jsonl"), "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return report_path
