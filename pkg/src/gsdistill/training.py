"""Two-stage distillation training: geometric refinement, then texture
refinement with densification and pruning.

One optimization step (fixed rng draw order, which is the determinism
contract for checkpoint/resume):

1. sample a camera (azimuth, elevation, radius)
2. view-tag the prompt and render the reference condition at that camera
3. render the scene once
4. control-residual draws (t, then eps) -> pixel gradient
5. moment-loss pixel gradient on the same render (no draws)
6. one render_backward on the summed pixel gradient
7. point-prior draws (t, then eps) -> extra gradient on means
8. Adam update of the scene
9. one surrogate training step (its own t, eps draws)

Terms whose weight is exactly zero are skipped entirely, including their rng
draws, so ablations reduce bit-exactly to the simpler method.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, NonFiniteLossError
from .guidance import (GuidanceConfig, NoiseSchedule, NoiseSurrogate,
                       ReferenceScoreOracle, lora_lambda, pointcloud_prior_gradient,
                       score_pixel_gradient, surrogate_train_step)
from .moments import StackConfig, moment_loss
from .optim import Adam
from .ply import read_scene_ply, write_scene_ply
from .pngio import write_rgb_png
from .renderer import RenderOptions, render, render_backward, render_with_context
from .scene import (GaussianScene, ReferenceAsset, camera_from_angles,
                    init_from_pointcloud, logit, normalize_quat, quat_to_rotmat,
                    sample_camera, view_prompt)

MA_WINDOW = 50
EMA_DECAY = 0.99
PARAM_GROUPS = ("colors", "log_scales", "logit_opacities", "means", "quats")


@dataclass
class CameraSampleConfig:
    width: int = 64
    height: int = 64
    fov_y_deg: float = 40.0
    elevation_deg: tuple = (-10.0, 45.0)
    azimuth_deg: tuple = (-180.0, 180.0)
    radius: tuple = (2.5, 3.5)
    near: float = 0.1
    far: float = 100.0

    def sample(self, rng: np.random.Generator):
        return sample_camera(
            rng,
            tuple(np.deg2rad(self.elevation_deg)),
            tuple(np.deg2rad(self.azimuth_deg)),
            tuple(self.radius),
            fov_y=float(np.deg2rad(self.fov_y_deg)),
            width=self.width, height=self.height, near=self.near, far=self.far)


@dataclass
class StageConfig:
    iterations: int = 15000
    texture: bool = False           # densify/prune run only in the texture stage
    lr_means: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    lr_scales: float = 5e-3
    lr_quats: float = 1e-3
    lr_opacities: float = 5e-2
    lr_colors: float = 2.5e-3
    densify_interval: int = 500
    densify_threshold: float = 0.02
    compact_interval: int = 1000
    prune_interval: int = 500
    opacity_floor: float = 0.05
    radius_ceiling: float = 0.05
    min_survivors: int = 16
    lambda_p: float = 1.0
    lambda_m: float = 100.0
    background: tuple = (0.0, 0.0, 0.0)
    camera: CameraSampleConfig = field(default_factory=CameraSampleConfig)

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        for name in ("densify_interval", "compact_interval", "prune_interval"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("densify_threshold", "opacity_floor", "radius_ceiling"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.lambda_p < 0 or self.lambda_m < 0:
            raise ConfigError("lambda_p and lambda_m must be >= 0")

    def learning_rates(self) -> Dict[str, float]:
        return {"means": self.lr_means, "log_scales": self.lr_scales,
                "quats": self.lr_quats, "logit_opacities": self.lr_opacities,
                "colors": self.lr_colors}


@dataclass
class TrainState:
    scene: GaussianScene
    surrogate: NoiseSurrogate
    adam: Adam
    rng: np.random.Generator
    prompt: str
    step: int = 0                   # global step across both stages
    total_steps: int = 0            # for the means learning-rate decay
    control_ma: float = 0.0
    moment_ma: float = 0.0
    asset_tree: Optional[cKDTree] = None


def init_train_state(scene: GaussianScene, asset: ReferenceAsset, prompt: str,
                     schedule: NoiseSchedule, stage_cfg: StageConfig,
                     rng: np.random.Generator, total_steps: int,
                     surrogate_lr: float = 1e-3) -> TrainState:
    surrogate = NoiseSurrogate(schedule, rng, learning_rate=surrogate_lr)
    adam = Adam(stage_cfg.learning_rates())
    return TrainState(scene=scene, surrogate=surrogate, adam=adam, rng=rng,
                      prompt=prompt, total_steps=total_steps,
                      asset_tree=cKDTree(asset.points))


def _means_lr_scale(state: TrainState, cfg: StageConfig) -> float:
    if state.total_steps <= 0:
        return 1.0
    frac = min(state.step, state.total_steps) / state.total_steps
    return float((cfg.lr_means_final / cfg.lr_means) ** frac)


def _scene_params(scene: GaussianScene) -> Dict[str, np.ndarray]:
    return {"means": scene.means, "log_scales": scene.log_scales,
            "quats": scene.quats, "logit_opacities": scene.logit_opacities,
            "colors": scene.colors}


def train_step(state: TrainState, asset: ReferenceAsset,
               oracle: ReferenceScoreOracle, schedule: NoiseSchedule,
               stage_cfg: StageConfig, guidance_cfg: GuidanceConfig,
               options: RenderOptions) -> Dict[str, float]:
    """One distillation step (shared by both stages); returns loss scalars."""
    state.step += 1
    camera = stage_cfg.camera.sample(state.rng)
    y = view_prompt(state.prompt, camera)
    condition = oracle.make_condition(camera)
    img, rctx = render_with_context(state.scene, camera, stage_cfg.background,
                                    options)

    lora = lora_lambda(state.step, guidance_cfg.lora_ramp_steps, guidance_cfg.lora_max)
    control_grad, _t = score_pixel_gradient(
        img.rgb, oracle, schedule, y, state.rng, condition=condition,
        surrogate=state.surrogate, lora=lora,
        guidance_scale=guidance_cfg.guidance_scale)
    pixel_grad = control_grad
    control_val = float(np.sqrt(np.mean(control_grad ** 2)))

    moment_val = 0.0
    if stage_cfg.lambda_m > 0.0:
        moment_val, moment_grad = moment_loss(img.rgb, condition.reference_rgb)
        pixel_grad = pixel_grad + stage_cfg.lambda_m * moment_grad

    grads = render_backward(state.scene, camera, stage_cfg.background, pixel_grad,
                            options, accumulate_viewspace=True, ctx=rctx)
    state.scene.step_counter += 1

    pc_val = 0.0
    if stage_cfg.lambda_p > 0.0:
        pc_grad = pointcloud_prior_gradient(
            state.scene, asset, schedule, state.rng,
            lambda_p=stage_cfg.lambda_p, tree=state.asset_tree)
        grads.d_means += pc_grad
        pc_val = float(np.sqrt(np.mean(pc_grad ** 2)))

    grad_dict = {"means": grads.d_means, "log_scales": grads.d_log_scales,
                 "quats": grads.d_quats, "logit_opacities": grads.d_logit_opacities,
                 "colors": grads.d_colors}
    state.adam.step(_scene_params(state.scene), grad_dict,
                    lr_scale={"means": _means_lr_scale(state, stage_cfg)})

    surrogate_val = surrogate_train_step(
        state.surrogate, [(img.rgb, condition, y)], schedule, state.rng)

    total = control_val + stage_cfg.lambda_m * moment_val + pc_val
    if not np.isfinite(total) or not np.isfinite(surrogate_val):
        raise NonFiniteLossError(
            f"non-finite loss at step {state.step}: control={control_val} "
            f"moment={moment_val} pc={pc_val} surrogate={surrogate_val}")
    state.control_ma = EMA_DECAY * state.control_ma + (1 - EMA_DECAY) * control_val
    state.moment_ma = EMA_DECAY * state.moment_ma + (1 - EMA_DECAY) * moment_val
    return {"step": state.step, "control": control_val, "moment": moment_val,
            "pc": pc_val, "surrogate": surrogate_val, "total": total,
            "lora": float(lora), "gaussians": len(state.scene)}


def geometry_step(state, asset, oracle, schedule, stage_cfg, guidance_cfg, options):
    return train_step(state, asset, oracle, schedule, stage_cfg, guidance_cfg, options)


def texture_step(state, asset, oracle, schedule, stage_cfg, guidance_cfg, options,
                 stage_step: int) -> Dict[str, float]:
    """Texture-stage step: optimize, then run the density-control events that
    fall on this step (split, then compact, then prune)."""
    scalars = train_step(state, asset, oracle, schedule, stage_cfg, guidance_cfg,
                         options)
    if stage_step % stage_cfg.densify_interval == 0:
        densify_split(state.scene, stage_cfg.densify_threshold, state.rng, state.adam)
    if stage_step % stage_cfg.compact_interval == 0:
        densify_compact(state.scene, state.adam)
    if stage_step % stage_cfg.prune_interval == 0:
        prune(state.scene, stage_cfg.opacity_floor, stage_cfg.radius_ceiling,
              stage_cfg.min_survivors, state.adam)
    scalars["gaussians"] = len(state.scene)
    return scalars


# ---------------------------------------------------------------------------
# density control


def _apply_keep_and_append(scene: GaussianScene, keep: np.ndarray,
                           new_arrays: Optional[Dict[str, np.ndarray]],
                           adam: Optional[Adam], reset_accum: bool) -> None:
    extra = 0 if new_arrays is None else new_arrays["means"].shape[0]
    for name in ("means", "log_scales", "quats", "logit_opacities", "colors"):
        arr = getattr(scene, name)[keep]
        if new_arrays is not None:
            arr = np.concatenate([arr, new_arrays[name]], axis=0)
        setattr(scene, name, arr)
    n = scene.means.shape[0]
    if reset_accum:
        scene.grad_accum = np.zeros(n)
        scene.step_counter = np.zeros(n, dtype=np.int64)
    else:
        scene.grad_accum = np.concatenate([scene.grad_accum[keep], np.zeros(extra)])
        scene.step_counter = np.concatenate(
            [scene.step_counter[keep], np.zeros(extra, dtype=np.int64)])
    if adam is not None:
        for name in PARAM_GROUPS:
            adam.remap(name, keep, extra)


def densify_split(scene: GaussianScene, threshold: float,
                  rng: np.random.Generator, adam: Optional[Adam] = None) -> GaussianScene:
    """Replace every Gaussian whose mean accumulated view-space gradient norm
    exceeds the threshold with two children sampled from the parent density
    (scales divided by 1.6); accumulators reset."""
    counts = np.maximum(scene.step_counter, 1)
    split = scene.grad_accum / counts > threshold
    if not split.any():
        scene.reset_grad_accum()
        return scene
    parents = np.nonzero(split)[0]
    k = parents.size
    draws = rng.standard_normal((k, 2, 3))
    scales = np.exp(scene.log_scales[parents])
    rot = quat_to_rotmat(normalize_quat(scene.quats[parents]))
    offsets = np.einsum("kij,kcj->kci", rot, draws * scales[:, None, :])
    child = {
        "means": (scene.means[parents][:, None, :] + offsets).reshape(2 * k, 3),
        "log_scales": np.repeat(scene.log_scales[parents] - np.log(1.6), 2, axis=0),
        "quats": np.repeat(scene.quats[parents], 2, axis=0),
        "logit_opacities": np.repeat(scene.logit_opacities[parents], 2),
        "colors": np.repeat(scene.colors[parents], 2, axis=0),
    }
    _apply_keep_and_append(scene, ~split, child, adam, reset_accum=True)
    return scene


def densify_compact(scene: GaussianScene, adam: Optional[Adam] = None,
                    k: int = 3) -> GaussianScene:
    """Insert a bridging Gaussian between each Gaussian and any of its k
    nearest neighbors whose center distance exceeds the sum of their radii
    (radius = mean scale); the new radius is half the remaining gap."""
    n = len(scene)
    if n < 2:
        return scene
    radii = np.exp(scene.log_scales).mean(axis=1)
    tree = cKDTree(scene.means)
    kk = min(k + 1, n)
    _d, idx = tree.query(scene.means, k=kk)
    pairs = set()
    for i in range(n):
        for j in idx[i, 1:]:
            pairs.add((min(i, int(j)), max(i, int(j))))
    new = {"means": [], "log_scales": [], "quats": [], "logit_opacities": [],
           "colors": []}
    for i, j in sorted(pairs):
        delta = scene.means[j] - scene.means[i]
        d = float(np.linalg.norm(delta))
        gap = d - radii[i] - radii[j]
        if gap <= 0.0 or d == 0.0:
            continue
        direction = delta / d
        center = scene.means[i] + direction * (radii[i] + gap / 2.0)
        radius = max(gap / 2.0, 1e-6)
        new["means"].append(center)
        new["log_scales"].append(np.full(3, np.log(radius)))
        new["quats"].append(np.array([1.0, 0.0, 0.0, 0.0]))
        opa = (scene.opacities[i] + scene.opacities[j]) / 2.0
        new["logit_opacities"].append(logit(np.clip(opa, 1e-6, 1 - 1e-6)))
        new["colors"].append((scene.colors[i] + scene.colors[j]) / 2.0)
    if not new["means"]:
        return scene
    arrays = {"means": np.asarray(new["means"]),
              "log_scales": np.asarray(new["log_scales"]),
              "quats": np.asarray(new["quats"]),
              "logit_opacities": np.asarray(new["logit_opacities"], dtype=np.float64),
              "colors": np.asarray(new["colors"])}
    _apply_keep_and_append(scene, np.ones(n, dtype=bool), arrays, adam,
                           reset_accum=False)
    return scene


def prune(scene: GaussianScene, opacity_floor: float = 0.05,
          radius_ceiling: float = 0.05, min_survivors: int = 16,
          adam: Optional[Adam] = None) -> GaussianScene:
    """Drop Gaussians with opacity below the floor or mean scale above the
    ceiling, keeping at least ``min_survivors`` (highest-opacity first)."""
    opa = scene.opacities
    radii = np.exp(scene.log_scales).mean(axis=1)
    keep = (opa >= opacity_floor) & (radii <= radius_ceiling)
    if keep.sum() < min(min_survivors, len(scene)):
        order = np.argsort(-opa, kind="stable")
        keep = np.zeros(len(scene), dtype=bool)
        keep[order[:min_survivors]] = True
    if keep.all():
        return scene
    _apply_keep_and_append(scene, keep, None, adam, reset_accum=False)
    return scene


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path: str, state: TrainState, stage: str, stage_step: int) -> None:
    os.makedirs(path, exist_ok=True)
    write_scene_ply(os.path.join(path, "scene.ply"), state.scene)
    with open(os.path.join(path, "surrogate.bin"), "wb") as fh:
        fh.write(state.surrogate.serialize())
    with open(os.path.join(path, "optim.bin"), "wb") as fh:
        fh.write(state.adam.serialize())
    np.savez(os.path.join(path, "accum.npz"), grad_accum=state.scene.grad_accum,
             step_counter=state.scene.step_counter)
    meta = {"step": state.step, "stage": stage, "stage_step": stage_step,
            "total_steps": state.total_steps, "prompt": state.prompt,
            "control_ma": state.control_ma, "moment_ma": state.moment_ma,
            "rng_state": state.rng.bit_generator.state}
    with open(os.path.join(path, "state.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def load_checkpoint(path: str, state: TrainState) -> Dict:
    state.scene = read_scene_ply(os.path.join(path, "scene.ply"))
    with open(os.path.join(path, "surrogate.bin"), "rb") as fh:
        state.surrogate.load(fh.read())
    with open(os.path.join(path, "optim.bin"), "rb") as fh:
        state.adam.load(fh.read())
    acc = np.load(os.path.join(path, "accum.npz"))
    state.scene.grad_accum = acc["grad_accum"].astype(np.float64)
    state.scene.step_counter = acc["step_counter"].astype(np.int64)
    with open(os.path.join(path, "state.json")) as fh:
        meta = json.load(fh)
    state.step = meta["step"]
    state.total_steps = meta["total_steps"]
    state.prompt = meta["prompt"]
    state.control_ma = meta["control_ma"]
    state.moment_ma = meta["moment_ma"]
    rs = meta["rng_state"]
    state.rng.bit_generator.state = rs
    return meta


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class PipelineConfig:
    prompt: str
    seed: int = 0
    init_count: int = 512
    init_opacity: float = 0.1
    geometry: StageConfig = field(default_factory=StageConfig)
    texture: StageConfig = field(default_factory=lambda: StageConfig(texture=True))
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    stack: StackConfig = field(default_factory=StackConfig)
    schedule_T: int = 1000
    surrogate_lr: float = 1e-3
    checkpoint_interval: int = 500
    frame_interval: int = 500
    threads: int = 1

    def render_options(self) -> RenderOptions:
        return RenderOptions(threads=self.threads)


def _truncate_metrics(path: str, step: int) -> None:
    if not os.path.exists(path):
        return
    kept = []
    with open(path) as fh:
        for line in fh:
            if line.strip() and json.loads(line)["step"] <= step:
                kept.append(line)
    with open(path, "w") as fh:
        fh.writelines(kept)


def _latest_checkpoint(out_dir: str) -> Optional[str]:
    root = os.path.join(out_dir, "checkpoints")
    if not os.path.isdir(root):
        return None
    names = sorted(d for d in os.listdir(root) if d.startswith("step_"))
    return os.path.join(root, names[-1]) if names else None


def run_pipeline(asset: ReferenceAsset, config: PipelineConfig, out_dir: str,
                 resume: bool = False) -> tuple[GaussianScene, List[Dict]]:
    """Full two-stage optimization against a reference asset.  Writes
    metrics.jsonl, periodic checkpoints/frames, and the final PLY under
    ``out_dir``; returns the final scene and the in-memory metrics list."""
    os.makedirs(out_dir, exist_ok=True)
    options = config.render_options()
    schedule = NoiseSchedule(T=config.schedule_T,
                             t_min_frac=config.guidance.t_min_frac,
                             t_max_frac=config.guidance.t_max_frac)
    oracle = ReferenceScoreOracle(asset, schedule, config.geometry.background, options)
    rng = np.random.default_rng(config.seed)
    scene = init_from_pointcloud(asset, config.init_count, config.init_opacity)
    total = config.geometry.iterations + config.texture.iterations
    state = init_train_state(scene, asset, config.prompt, schedule,
                             config.geometry, rng, total, config.surrogate_lr)

    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    stages = [("geometry", config.geometry), ("texture", config.texture)]
    start_stage, start_stage_step = 0, 0
    if resume:
        ckpt = _latest_checkpoint(out_dir)
        if ckpt is not None:
            meta = load_checkpoint(ckpt, state)
            start_stage = next(i for i, (name, _c) in enumerate(stages)
                               if name == meta["stage"])
            start_stage_step = meta["stage_step"]
            _truncate_metrics(metrics_path, state.step)
    elif os.path.exists(metrics_path):
        os.remove(metrics_path)

    metrics: List[Dict] = []
    mode = "a" if resume else "w"
    with open(metrics_path, mode) as log:
        for si in range(start_stage, len(stages)):
            stage_name, stage_cfg = stages[si]
            first = start_stage_step + 1 if si == start_stage else 1
            for s in range(first, stage_cfg.iterations + 1):
                if stage_cfg.texture:
                    scalars = texture_step(state, asset, oracle, schedule, stage_cfg,
                                           config.guidance, options, s)
                else:
                    scalars = geometry_step(state, asset, oracle, schedule, stage_cfg,
                                            config.guidance, options)
                scalars["stage"] = stage_name
                metrics.append(scalars)
                log.write(json.dumps(scalars, sort_keys=True) + "\n")
                if config.frame_interval and state.step % config.frame_interval == 0:
                    _export_frame(state.scene, stage_cfg, options, out_dir, state.step,
                                  state.step // config.frame_interval)
                if config.checkpoint_interval and \
                        state.step % config.checkpoint_interval == 0:
                    save_checkpoint(
                        os.path.join(out_dir, "checkpoints", f"step_{state.step:06d}"),
                        state, stage_name, s)
    write_scene_ply(os.path.join(out_dir, "scene_final.ply"), state.scene)
    return state.scene, metrics


def _export_frame(scene, stage_cfg, options, out_dir, step, frame_index):
    frames = os.path.join(out_dir, "frames")
    os.makedirs(frames, exist_ok=True)
    cam_cfg = stage_cfg.camera
    azimuth = np.deg2rad(45.0) * frame_index
    camera = camera_from_angles(
        float(azimuth), np.deg2rad(15.0), float(np.mean(cam_cfg.radius)),
        fov_y=float(np.deg2rad(cam_cfg.fov_y_deg)), width=cam_cfg.width,
        height=cam_cfg.height, near=cam_cfg.near, far=cam_cfg.far)
    img = render(scene, camera, stage_cfg.background, options)
    write_rgb_png(os.path.join(frames, f"frame_{step:06d}.png"), img.rgb)


def moving_average(values, window: int = MA_WINDOW) -> float:
    """Trailing mean of the last ``window`` values."""
    tail = list(values)[-window:]
    if not tail:
        raise ConfigError("moving average of an empty series")
    return float(np.mean(tail))
