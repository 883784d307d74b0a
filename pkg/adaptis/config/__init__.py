"""Configuration and environment helpers."""

from .environment import default_output_dir, load_local_env, resolve_device
from .settings import (
    ConfigError,
    GenConfig,
    InferenceConfig,
    LossConfig,
    ModelConfig,
    RunConfig,
    TrainConfig,
    load_run_config,
    write_run_config,
)

__all__ = [
    "ConfigError",
    "GenConfig",
    "InferenceConfig",
    "LossConfig",
    "ModelConfig",
    "RunConfig",
    "TrainConfig",
    "default_output_dir",
    "load_local_env",
    "load_run_config",
    "resolve_device",
    "write_run_config",
]
