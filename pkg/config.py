"""Centralize configuration and environment variables for the inverse-rendering pipeline."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch
from dotenv import load_dotenv

from core.ledger import canonical_json, content_hash, read_json
from core.validator import ConfigError

THREADS_ENV = "INVRL_THREADS"


@dataclass
class SceneConfig:
    point_budget: int = 800_000
    per_object_budget: int = 5_000
    knn_k: int = 3
    min_init_scale: float = 1e-3
    scale_floor: float = 1e-6
    init_opacity: float = 0.5
    init_roughness: float = 0.5
    init_rgb_albedo: float = 0.5
    init_color: float = 0.5
    # "sensor" points normals at the sensor origin; "pca" uses the kNN plane
    # normal oriented toward the sensor.
    normal_init: str = "sensor"


@dataclass
class ShadingConfig:
    f0: float = 0.04
    emitted_power: float = 1.0
    # "full" is the specular LiDAR model, "lambertian" drops the specular term.
    lidar_model: str = "full"
    range_compensated: bool = False
    sun_brdf: bool = True


@dataclass
class VisibilityConfig:
    opacity_threshold: float = 0.5
    epsilon: float = 1e-3
    sigma_extent: float = 3.0
    leaf_size: int = 4
    ray_chunk: int = 65_536


@dataclass
class RenderConfig:
    samples_train: int = 16
    samples_final: int = 128
    samples_reference: int = 512
    near_plane: float = 0.01
    dilation: float = 0.3
    alpha_min: float = 1.0 / 255.0
    transmittance_min: float = 1e-4
    lidar_mask_threshold: float = 0.0
    # "blend" alpha-blends LiDAR attributes, "first" keeps the front-most primitive.
    lidar_composite: str = "blend"


@dataclass
class LossConfig:
    lambda_lidar: float = 1.0
    lambda_rgb: float = 1.0
    lambda_normal: float = 0.1
    lambda_material: float = 0.1
    lambda_rgb_to_lidar: float = 0.05
    lambda_lidar_to_rgb: float = 0.05
    sigma: float = 0.1
    neighborhood_radius: int = 1
    variance_bins: int = 8


@dataclass
class ScheduleConfig:
    learning_rate: float = 1e-5
    max_iterations: int = 30_000
    stage1_iterations: int = 15_000
    checkpoint_every: int = 1_000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    stage2_train_roughness: bool = False
    # 0 traces sky visibility once when stage 2 starts; N > 0 re-traces every N steps.
    visibility_retrace_every: int = 0
    log_every: int = 100


@dataclass
class DensifyConfig:
    enabled: bool = False
    interval: int = 100
    grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    split_factor: float = 1.6


@dataclass
class SynthConfig:
    image_size: int = 64
    num_frames: int = 4
    noise: float = 0.0
    prior_noise_sigma: float = 0.05
    bias_amplitude: float = 0.05


@dataclass
class NightConfig:
    sky_epsilon: float = 0.01
    cone_half_angle_deg: float = 30.0
    cone_exponent: float = 8.0


@dataclass
class RunConfig:
    """Every tunable of the pipeline, with defaults."""

    seed: int = 0
    data_dir: str | None = None
    out_dir: str | None = None
    scene: SceneConfig = field(default_factory=SceneConfig)
    shading: ShadingConfig = field(default_factory=ShadingConfig)
    visibility: VisibilityConfig = field(default_factory=VisibilityConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    night: NightConfig = field(default_factory=NightConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        return content_hash(canonical_json(self.to_dict()))


_CHOICES = {
    ("scene", "normal_init"): ("sensor", "pca"),
    ("shading", "lidar_model"): ("full", "lambertian"),
    ("render", "lidar_composite"): ("blend", "first"),
}


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Load and validate configuration.

    Loads variables from .env, applies the JSON config file (if any) on top of
    the defaults, then dotted ``section.field`` overrides.

    Raises:
        ConfigError: On unknown keys, wrong types or out-of-range values.
    """
    load_dotenv()
    payload: dict[str, Any] = {}
    if path is not None:
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigError(f"Config file not found: {config_path}")
        try:
            payload = read_json(config_path)
        except RuntimeError as exc:
            raise ConfigError(str(exc)) from exc

    config = _build(RunConfig, payload, "config")
    for key, raw in (overrides or {}).items():
        apply_override(config, key, raw)
    _check_ranges(config)
    return config


def apply_override(config: RunConfig, key: str, raw: Any) -> None:
    """Set ``section.field`` (or a top-level field) from a string value."""
    parts = key.replace("-", "_").split(".")
    target: Any = config
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(target) or part not in _field_names(target):
            raise ConfigError(f"Unknown config key: {key}")
        target = getattr(target, part)
    name = parts[-1]
    if not dataclasses.is_dataclass(target) or name not in _field_names(target):
        raise ConfigError(f"Unknown config key: {key}")
    current = getattr(target, name)
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"Config key '{key}' names a section, not a value")
    setattr(target, name, _coerce(raw, current, key))


def thread_cap() -> int | None:
    """Parallelism cap from INVRL_THREADS (None when unset)."""
    load_dotenv()
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return None
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got '{raw}'") from exc
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    return value


def configure_torch() -> None:
    """Pin torch to deterministic float64 CPU execution.

    Intra-op parallelism stays at one thread so reductions keep a fixed order;
    INVRL_THREADS caps the frame-level worker pools instead.
    """
    torch.set_default_dtype(torch.float64)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def _field_names(obj: Any) -> set[str]:
    return {f.name for f in dataclasses.fields(obj)}


def _build(cls: type, payload: dict[str, Any], where: str) -> Any:
    if not isinstance(payload, dict):
        raise ConfigError(f"Section '{where}' must be an object")
    defaults = cls()
    known = _field_names(defaults)
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"Unknown config key(s) in '{where}': {', '.join(unknown)}")
    for name, value in payload.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            setattr(defaults, name, _build(type(current), value, f"{where}.{name}"))
        else:
            setattr(defaults, name, _coerce(value, current, f"{where}.{name}"))
    return defaults


def _coerce(value: Any, current: Any, key: str) -> Any:
    """Convert value to the type of the current default."""
    try:
        if isinstance(current, bool):
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "on", "yes"):
                return True
            if text in ("0", "false", "off", "no"):
                return False
            raise ValueError(value)
        if isinstance(current, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(current, float):
            return float(value)
        if value is None:
            return None
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"Invalid value for '{key}': {value!r}") from exc


def _check_ranges(config: RunConfig) -> None:
    for (section, name), allowed in _CHOICES.items():
        value = getattr(getattr(config, section), name)
        if value not in allowed:
            raise ConfigError(f"{section}.{name} must be one of {allowed}, got '{value}'")
    if config.scene.point_budget < 1:
        raise ConfigError("scene.point_budget must be >= 1")
    if config.loss.sigma <= 0:
        raise ConfigError("loss.sigma must be > 0")
    if config.loss.variance_bins < 1:
        raise ConfigError("loss.variance_bins must be >= 1")
    for name in ("lambda_lidar", "lambda_rgb", "lambda_normal", "lambda_material",
                 "lambda_rgb_to_lidar", "lambda_lidar_to_rgb"):
        if getattr(config.loss, name) < 0:
            raise ConfigError(f"loss.{name} must be >= 0")
    sched = config.schedule
    if not 0 <= sched.stage1_iterations <= sched.max_iterations:
        raise ConfigError("schedule.stage1_iterations must lie in [0, max_iterations]")
    if sched.learning_rate <= 0:
        raise ConfigError("schedule.learning_rate must be > 0")
    if sched.checkpoint_every < 1:
        raise ConfigError("schedule.checkpoint_every must be >= 1")
    if config.render.samples_train < 1 or config.render.samples_final < 1:
        raise ConfigError("render sample counts must be >= 1")
    if not 0 <= config.visibility.opacity_threshold <= 1:
        raise ConfigError("visibility.opacity_threshold must lie in [0, 1]")
