"""
This module defines data classes for optimizer configuration,
surfel initialization, keyframe policy, dataset layout,
synthetic scenes and whole pipeline runs.

A run can be described by a key = value text file (parsed with python-dotenv);
keys are the field names of the data classes below, flattened.
"""
import dataclasses
import math
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from dotenv import dotenv_values

from .exceptions import ConfigurationError

THREADS_ENV_VAR = "SURFEL_DEPTH_THREADS"

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}
_RUN_SCALARS = {"output_dir", "radius_px", "seed", "threads"}


@dataclass
class OptimizerConfig:
    """Levenberg-Marquardt surfel optimizer configuration class."""

    huber_delta: float = 0.035
    lm_lambda_init: float = 1e-2
    lm_up: float = 10.0
    lm_down: float = 0.5
    max_iterations: int = 10
    min_valid_pixels: int = 16
    window_size: int = 5
    convergence_eps: float = 1e-4
    normal_jacobian_enabled: bool = True
    min_inv_depth: float = 1e-4
    max_inv_depth: float = 1e3

    def validate(self) -> None:
        positive = {
            "huber_delta": self.huber_delta,
            "lm_lambda_init": self.lm_lambda_init,
            "lm_up": self.lm_up,
            "lm_down": self.lm_down,
            "max_iterations": self.max_iterations,
            "min_valid_pixels": self.min_valid_pixels,
            "window_size": self.window_size,
            "convergence_eps": self.convergence_eps,
            "min_inv_depth": self.min_inv_depth,
        }
        for name, value in positive.items():
            if not value > 0:
                raise ConfigurationError(f"{name} must be positive, got {value}")
        if not self.lm_up > 1:
            raise ConfigurationError(f"lm_up must exceed 1, got {self.lm_up}")
        if not 0 < self.lm_down < 1:
            raise ConfigurationError(f"lm_down must lie in (0, 1), got {self.lm_down}")
        if not self.max_inv_depth > self.min_inv_depth:
            raise ConfigurationError("max_inv_depth must exceed min_inv_depth")


@dataclass
class InitParams:
    """Surfel initialization configuration class (alpha, beta in surfel radii)."""

    alpha: float = 1.0
    beta: float = 2.5
    bootstrap_inv_depth: float = 1.0
    max_surfels: int = 4096

    def validate(self) -> None:
        if not (self.alpha > 0 and self.beta > 0):
            raise ConfigurationError("alpha and beta must be positive")
        if not self.bootstrap_inv_depth > 0:
            raise ConfigurationError("bootstrap_inv_depth must be positive")
        if self.max_surfels < 0:
            raise ConfigurationError("max_surfels must be non-negative")


@dataclass
class KeyframePolicy:
    """Keyframe change configuration class."""

    translation_threshold: float = 0.15
    max_window_age: int = 20
    # surfels handed over to a new keyframe are pruned past these limits
    prune_residual: float = math.inf
    prune_age: int = 60


@dataclass
class ExportConfig:
    """Artifact export configuration class."""

    # export every N frames in addition to the end of the run; 0 exports at the end
    export_interval: int = 0
    export_ply: bool = True
    export_png: bool = True


@dataclass
class DatasetManifest:
    """Dataset layout class: images, calibration and trajectory on disk."""

    image_dir: Path
    calibration: Path
    trajectory: Path
    # fallback association tolerance when no image stem matches a timestamp
    association_tolerance: float = 0.01


@dataclass
class SceneSpec:
    """Synthetic scene configuration class."""

    scene: str = "corner"
    motion: str = "strafe"
    frames: int = 60
    # image resolution relative to 640x480
    scale: float = 1.0
    noise_sigma: float = 0.0


@dataclass
class RunConfig:
    """Pipeline run configuration class."""

    output_dir: Path = Path("output")
    dataset: DatasetManifest | None = None
    synthetic: SceneSpec | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    init: InitParams = field(default_factory=InitParams)
    keyframe_policy: KeyframePolicy = field(default_factory=KeyframePolicy)
    export: ExportConfig = field(default_factory=ExportConfig)
    radius_px: float = 10.0
    seed: int = 0
    threads: int = 1

    def validate(self) -> None:
        if self.radius_px < 2:
            raise ConfigurationError(f"radius_px must be >= 2, got {self.radius_px}")
        if (self.dataset is None) == (self.synthetic is None):
            raise ConfigurationError(
                "exactly one of a dataset manifest or a synthetic scene is required"
            )
        if self.threads < 1:
            raise ConfigurationError(f"threads must be >= 1, got {self.threads}")
        if self.export.export_interval < 0:
            raise ConfigurationError("export_interval must be non-negative")
        self.optimizer.validate()
        self.init.validate()


def threads_from_env() -> int:
    """Worker thread count from SURFEL_DEPTH_THREADS (default 1)."""
    raw = os.environ.get(THREADS_ENV_VAR, "1")
    try:
        threads = int(raw)
    except ValueError as err:
        message = f"{THREADS_ENV_VAR}={raw!r} is not an integer"
        raise ConfigurationError(message) from err
    if threads < 1:
        raise ConfigurationError(f"{THREADS_ENV_VAR} must be >= 1, got {threads}")
    return threads


def load_config_file(path: str | Path) -> dict[str, str]:
    """
    Read a key = value configuration file.

    Parameters
    ----------
    path : str | Path
        Path to the file. Keys are case-insensitive; `-` and `_` are equivalent.

    Returns
    -------
    dict[str, str]
        Normalized keys mapped to their raw string values.
    """
    if not Path(path).is_file():
        raise ConfigurationError(f"config file not found: {path}")
    values = dotenv_values(path)
    return {
        normalize_key(key): value for key, value in values.items() if value is not None
    }


def normalize_key(key: str) -> str:
    return key.strip().lower().replace("-", "_")


def _coerce(raw: Any, target: Any, key: str) -> Any:
    if not isinstance(raw, str):
        return raw
    origin = typing.get_origin(target)
    if origin in (typing.Union, types.UnionType):
        inner = [t for t in typing.get_args(target) if t is not type(None)]
        target = inner[0]
    try:
        if target is bool:
            lowered = raw.strip().lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(raw)
        if target is int:
            return int(raw)
        if target is float:
            return float(raw)
        if target is Path:
            return Path(raw)
        return raw
    except ValueError as err:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {target}") from err


def _populate(cls: type, values: Mapping[str, Any]) -> Any:
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for item in dataclasses.fields(cls):
        if item.name in values:
            kwargs[item.name] = _coerce(values[item.name], hints[item.name], item.name)
    return cls(**kwargs)


def build_run_config(values: Mapping[str, Any]) -> RunConfig:
    """
    Build a RunConfig from flattened key/value settings.

    Keys belong to RunConfig or one of its nested data classes. A dataset is
    configured by `image_dir`, `calibration` and `trajectory`; a synthetic run
    by `scene` (plus optional scene keys).
    """
    values = {normalize_key(k): v for k, v in values.items() if v is not None}
    known = {
        f.name
        for cls in (
            RunConfig,
            OptimizerConfig,
            InitParams,
            KeyframePolicy,
            ExportConfig,
            DatasetManifest,
            SceneSpec,
        )
        for f in dataclasses.fields(cls)
    }
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"unknown configuration keys: {', '.join(unknown)}")

    dataset = None
    if any(k in values for k in ("image_dir", "calibration", "trajectory")):
        missing = [
            k for k in ("image_dir", "calibration", "trajectory") if k not in values
        ]
        if missing:
            raise ConfigurationError(f"dataset needs {', '.join(missing)}")
        dataset = _populate(DatasetManifest, values)

    synthetic = None
    if "scene" in values:
        synthetic = _populate(SceneSpec, values)

    top = {k: v for k, v in values.items() if k in _RUN_SCALARS}
    config = _populate(RunConfig, top)
    config.dataset = dataset
    config.synthetic = synthetic
    config.optimizer = _populate(OptimizerConfig, values)
    config.init = _populate(InitParams, values)
    config.keyframe_policy = _populate(KeyframePolicy, values)
    config.export = _populate(ExportConfig, values)
    config.validate()
    return config
