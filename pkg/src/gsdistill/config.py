"""Run configuration: a YAML file mirroring the library's config dataclasses.

Every field has a default; unknown keys are rejected with their full path so
typos never silently fall back to defaults.  ``lambda_p``/``lambda_m`` are
set once under ``guidance`` and propagated to both stages.  The fully
resolved configuration (defaults filled in) is echoed into the output
directory by the CLI so runs are self-describing.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Optional

import yaml

from .errors import ConfigError
from .evaluation import SweepConfig
from .guidance import GuidanceConfig
from .moments import StackConfig
from .training import CameraSampleConfig, PipelineConfig, StageConfig

CATALOG_ENV = "GSDISTILL_CATALOG"

# structural fields never settable from YAML
_EXCLUDED = {StageConfig: {"texture", "lambda_p", "lambda_m"}}

_TUPLE_FIELDS = {"elevation_deg", "azimuth_deg", "radius", "background"}


def _from_dict(cls, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    allowed = set(fields) - _EXCLUDED.get(cls, set())
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}; "
                          f"allowed: {sorted(allowed)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        sub = _NESTED.get((cls, name))
        if sub is not None:
            kwargs[name] = _from_dict(sub, value, f"{path}.{name}")
        elif name in _TUPLE_FIELDS and isinstance(value, (list, tuple)):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


@dataclass
class RunConfig:
    prompt: str = ""
    catalog: str = ""
    output: str = "runs/out"
    seed: int = 0
    threads: int = 1
    init_count: int = 512
    init_opacity: float = 0.1
    schedule_T: int = 1000
    surrogate_lr: float = 1e-3
    checkpoint_interval: int = 500
    frame_interval: int = 500
    geometry: StageConfig = field(default_factory=StageConfig)
    texture: StageConfig = field(default_factory=lambda: StageConfig(texture=True))
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    stack: StackConfig = field(default_factory=StackConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self):
        self.texture.texture = True
        self.geometry.texture = False
        for stage in (self.geometry, self.texture):
            stage.lambda_p = self.guidance.lambda_p
            stage.lambda_m = self.guidance.lambda_m

    def resolved_catalog(self) -> str:
        if self.catalog:
            return self.catalog
        env = os.environ.get(CATALOG_ENV, "")
        if env:
            return env
        raise ConfigError(f"no catalog configured (set 'catalog' or ${CATALOG_ENV})")

    def to_pipeline(self) -> PipelineConfig:
        if not self.prompt:
            raise ConfigError("config requires a non-empty 'prompt'")
        return PipelineConfig(
            prompt=self.prompt, seed=self.seed, init_count=self.init_count,
            init_opacity=self.init_opacity, geometry=self.geometry,
            texture=self.texture, guidance=self.guidance, stack=self.stack,
            schedule_T=self.schedule_T, surrogate_lr=self.surrogate_lr,
            checkpoint_interval=self.checkpoint_interval,
            frame_interval=self.frame_interval, threads=self.threads)

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        for stage in ("geometry", "texture"):
            for name in _EXCLUDED[StageConfig]:
                data[stage].pop(name, None)
        return _tuples_to_lists(data)


_NESTED = {
    (RunConfig, "geometry"): StageConfig,
    (RunConfig, "texture"): StageConfig,
    (RunConfig, "guidance"): GuidanceConfig,
    (RunConfig, "stack"): StackConfig,
    (RunConfig, "sweep"): SweepConfig,
    (StageConfig, "camera"): CameraSampleConfig,
}


def _tuples_to_lists(obj):
    if isinstance(obj, dict):
        return {k: _tuples_to_lists(v) for k, v in obj.items()}
    if isinstance(obj, tuple):
        return [_tuples_to_lists(v) for v in obj]
    return obj


def load_run_config(path: str, overrides: Optional[dict] = None) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    return _from_dict(RunConfig, data, path="config")


def default_run_config(**overrides) -> RunConfig:
    return _from_dict(RunConfig, overrides, path="config")


def write_resolved_config(config: RunConfig, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config_resolved.yaml")
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, default_flow_style=False, sort_keys=True)
    return path
