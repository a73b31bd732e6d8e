"""gsdistill: text-to-3D Gaussian-splat distillation at desk scale.

Differentiable 3D Gaussian splatting optimized by score-distillation
gradients from deterministic, depth-conditioned guidance oracles, with a
geometric-moment shape-consistency loss and a point-cloud prior anchored to
a retrieved reference asset.
"""

from .errors import (ConfigError, ContractError, DegenerateImageError,
                     GsdistillError, NonFiniteLossError, RenderError,
                     TimestepRangeError)
from .scene import (CameraPose, Gaussian3D, GaussianScene, PromptEmbedding,
                    ReferenceAsset, camera_from_angles, farthest_point_sample,
                    init_from_pointcloud, sample_camera, view_direction_tag,
                    view_prompt)
from .renderer import (RenderedImage, RenderGradients, RenderOptions, project,
                       render, render_backward, render_reference)
from .moments import (MomentFeatureStack, MomentVector, StackConfig,
                      central_moments, dgm_features, hu_invariants, moment_loss,
                      raw_moments, scale_normalized_moments)
from .guidance import (DepthCondition, DiffusionSample, GuidanceConfig,
                       NoiseSchedule, NoiseSurrogate, ReferenceScoreOracle,
                       ScoreOracle, lora_lambda, pointcloud_prior_gradient,
                       reference_score_oracle, sds_gradient, surrogate_train_step,
                       vsd_control_gradient)
from .optim import Adam
from .training import (CameraSampleConfig, PipelineConfig, StageConfig,
                       TrainState, densify_compact, densify_split, geometry_step,
                       init_train_state, moving_average, prune, run_pipeline,
                       texture_step, train_step)
from .retrieval import Catalog, CatalogEntry, RetrievalResult, load_catalog, retrieve
from .embedding import EMBED_DIM, cosine, embed
from .evaluation import (IoUReport, JanusReport, SweepConfig, ViewSweep,
                         janus_proxy, metrics_report, render_sweep,
                         silhouette_iou, turntable_strip)
from .ply import (load_reference_asset, read_ply, read_scene_ply,
                  write_pointcloud_ply, write_scene_ply)
from .assets import (cube_asset, figure_asset, mirror_scene_x,
                     sphere_asset, write_toy_catalog)
from . import assets

__version__ = "0.1.0"

__all__ = [
    "Adam", "CameraPose", "CameraSampleConfig", "Catalog", "CatalogEntry",
    "ConfigError", "ContractError", "DegenerateImageError", "DepthCondition",
    "DiffusionSample", "EMBED_DIM", "Gaussian3D", "GaussianScene",
    "GsdistillError", "GuidanceConfig", "IoUReport", "JanusReport",
    "MomentFeatureStack", "MomentVector", "NoiseSchedule", "NoiseSurrogate",
    "NonFiniteLossError", "PipelineConfig", "PromptEmbedding", "ReferenceAsset",
    "ReferenceScoreOracle", "RenderError", "RenderGradients", "RenderOptions",
    "RenderedImage", "RetrievalResult", "ScoreOracle", "StackConfig",
    "StageConfig", "SweepConfig", "TimestepRangeError", "TrainState",
    "ViewSweep", "assets", "camera_from_angles", "central_moments", "cosine",
    "cube_asset", "figure_asset", "mirror_scene_x", "sphere_asset",
    "write_toy_catalog",
    "densify_compact", "densify_split", "dgm_features", "embed",
    "farthest_point_sample", "geometry_step", "hu_invariants",
    "init_from_pointcloud", "init_train_state", "janus_proxy", "load_catalog",
    "load_reference_asset", "lora_lambda", "metrics_report", "moment_loss",
    "moving_average", "pointcloud_prior_gradient", "project", "prune",
    "raw_moments", "read_ply", "read_scene_ply", "reference_score_oracle",
    "render", "render_backward", "render_reference", "render_sweep", "retrieve",
    "run_pipeline", "sample_camera", "scale_normalized_moments", "sds_gradient",
    "silhouette_iou", "surrogate_train_step", "texture_step", "train_step",
    "turntable_strip", "view_direction_tag", "view_prompt",
    "vsd_control_gradient", "write_pointcloud_ply", "write_scene_ply",
]
