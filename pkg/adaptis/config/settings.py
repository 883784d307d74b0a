"""Dataclass configuration for data generation, the network, training and inference."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

LOGGER = logging.getLogger(__name__)

BACKGROUND_CLASS = 0
CAPSULE_CLASS = 1
ELLIPSE_CLASS = 2
TEXTURE_CLASS = 3


class ConfigError(ValueError):
    """Raised for unknown configuration keys or values outside their valid range."""


def _check_range(name: str, value: Tuple[float, float], *, minimum: float = 0.0) -> None:
    if len(value) != 2:
        raise ConfigError(f"{name} must be a (low, high) pair, got {value!r}")
    low, high = value
    if low > high:
        raise ConfigError(f"{name} is empty: {low} > {high}")
    if low < minimum:
        raise ConfigError(f"{name} must be >= {minimum}, got {low}")


@dataclasses.dataclass
class GenConfig:
    """Parameters of the synthetic toy benchmark."""

    image_size: Tuple[int, int] = (96, 96)
    objects_per_image: Tuple[int, int] = (8, 22)
    object_length_range: Tuple[float, float] = (20.0, 40.0)
    object_width_range: Tuple[float, float] = (8.0, 12.0)
    border_width: float = 1.5
    blur_sigma_range: Tuple[float, float] = (0.0, 1.0)
    noise_amplitude_range: Tuple[float, float] = (0.0, 24.0)
    panoptic_mode: bool = False
    ellipse_fraction: float = 0.4
    stuff_fraction_range: Tuple[float, float] = (0.2, 0.4)
    n_train: int = 10000
    n_test: int = 2000
    seed: int = 0
    max_object_retries: int = 20

    def validate(self) -> "GenConfig":
        _check_range("objects_per_image", self.objects_per_image, minimum=1)
        _check_range("object_length_range", self.object_length_range)
        _check_range("object_width_range", self.object_width_range)
        _check_range("blur_sigma_range", self.blur_sigma_range)
        _check_range("noise_amplitude_range", self.noise_amplitude_range)
        _check_range("stuff_fraction_range", self.stuff_fraction_range)
        if self.stuff_fraction_range[1] > 1.0:
            raise ConfigError("stuff_fraction_range must lie within [0, 1]")
        if len(self.image_size) != 2 or min(self.image_size) <= 0:
            raise ConfigError(f"image_size must be a positive (H, W) pair, got {self.image_size!r}")
        if min(self.image_size) < 2 * self.object_width_range[1]:
            raise ConfigError(
                f"image_size {self.image_size} must be at least twice the maximum object width "
                f"({self.object_width_range[1]})"
            )
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("split sizes must be non-negative")
        if not 0.0 <= self.ellipse_fraction <= 1.0:
            raise ConfigError("ellipse_fraction must lie within [0, 1]")
        if self.max_object_retries < 0:
            raise ConfigError("max_object_retries must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a non-negative 64-bit integer")
        return self

    @property
    def thing_classes(self) -> Tuple[int, ...]:
        if self.panoptic_mode:
            return (CAPSULE_CLASS, ELLIPSE_CLASS)
        return (CAPSULE_CLASS,)

    @property
    def stuff_classes(self) -> Tuple[int, ...]:
        if self.panoptic_mode:
            return (BACKGROUND_CLASS, TEXTURE_CLASS)
        return (BACKGROUND_CLASS,)

    @property
    def num_classes(self) -> int:
        return len(self.thing_classes) + len(self.stuff_classes)


@dataclasses.dataclass
class ModelConfig:
    """Shape of the backbone, controller and heads."""

    in_channels: int = 3
    backbone_depth: int = 3
    backbone_width: int = 32
    controller_widths: Tuple[int, ...] = (128,)
    head_widths: Tuple[int, ...] = (32, 32, 32)
    coordconv_radius: float = 48.0
    use_coordconv: bool = True
    num_classes: int = 1
    segmentation_head_width: int = 32
    adain_eps: float = 1e-5

    def validate(self) -> "ModelConfig":
        if self.coordconv_radius <= 0:
            raise ConfigError("coordconv_radius must be positive")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.backbone_depth < 1 or self.backbone_width < 1:
            raise ConfigError("backbone_depth and backbone_width must be positive")
        if not self.head_widths or min(self.head_widths) < 1:
            raise ConfigError("head_widths must list at least one positive width")
        if self.controller_widths and min(self.controller_widths) < 1:
            raise ConfigError("controller_widths must be positive")
        return self

    @property
    def semantic_enabled(self) -> bool:
        # A single class means class-agnostic mode without a semantic branch.
        return self.num_classes >= 2

    @property
    def adain_demand(self) -> int:
        return 2 * sum(self.head_widths)

    @property
    def size_divisor(self) -> int:
        return 2 ** self.backbone_depth


@dataclasses.dataclass
class LossConfig:
    """Instance-mask loss selection."""

    kind: str = "nfl"
    gamma: float = 2.0
    epsilon: float = 1e-6
    normalizer_detached: bool = True

    def validate(self) -> "LossConfig":
        if self.kind not in {"nfl", "fl", "bce"}:
            raise ConfigError(f"loss kind must be one of nfl, fl, bce; got {self.kind!r}")
        if not (self.gamma >= 0.0 and self.gamma != float("inf")):
            raise ConfigError("gamma must be finite and >= 0")
        if not 0.0 < self.epsilon <= 1e-3:
            raise ConfigError("epsilon must lie in (0, 1e-3]")
        return self


@dataclasses.dataclass
class TrainConfig:
    """Optimisation schedule for both training stages."""

    epochs: int = 140
    batch_size: int = 16
    lr: float = 5e-4
    lr_milestones: Tuple[int, ...] = ()
    lr_gamma: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    points_per_image: int = 6
    proposal_candidates_per_object: int = 48
    proposal_epochs: int = 10
    proposal_lr: float = 5e-4
    loss: LossConfig = dataclasses.field(default_factory=LossConfig)
    semantic_loss_weight: float = 1.0
    instance_loss_weight: float = 1.0
    hflip: bool = True
    vflip: bool = True
    rot90: bool = True
    checkpoint_every: int = 10
    num_workers: int = 0
    device: str = "auto"
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.points_per_image < 1:
            raise ConfigError("points_per_image (K) must be >= 1")
        if self.lr <= 0 or self.proposal_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        milestones = list(self.lr_milestones)
        if milestones != sorted(set(milestones)) or any(m < 1 or m > self.epochs for m in milestones):
            raise ConfigError("lr_milestones must be strictly ascending and within epochs")
        if self.proposal_candidates_per_object < 1:
            raise ConfigError("proposal_candidates_per_object must be >= 1")
        self.loss.validate()
        return self


@dataclasses.dataclass
class InferenceConfig:
    """Greedy aggregation and evaluation settings."""

    threshold: float = 0.5
    strategy: str = "auto"
    max_iters: int = 100
    random_candidates: int = 7
    chunk_size: int = 64
    ap_thresholds: Tuple[float, ...] = (0.5, 0.6, 0.7, 0.8, 0.9)
    consistency_objects: int = 100
    save_confidences: bool = False
    device: str = "auto"
    seed: int = 0

    def validate(self) -> "InferenceConfig":
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.strategy not in {"auto", "random", "learned"}:
            raise ConfigError(f"strategy must be 'auto', 'random' or 'learned', got {self.strategy!r}")
        if self.max_iters < 1 or self.random_candidates < 1 or self.chunk_size < 1:
            raise ConfigError("max_iters, random_candidates and chunk_size must be >= 1")
        return self


@dataclasses.dataclass
class RunConfig:
    """Merged configuration consumed by every CLI command."""

    gen: GenConfig = dataclasses.field(default_factory=GenConfig)
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    infer: InferenceConfig = dataclasses.field(default_factory=InferenceConfig)
    seed: Optional[int] = None
    deterministic: bool = False

    def validate(self) -> "RunConfig":
        self.gen.validate()
        self.model.validate()
        self.train.validate()
        self.infer.validate()
        divisor = self.model.size_divisor
        if self.gen.image_size[0] % divisor or self.gen.image_size[1] % divisor:
            raise ConfigError(
                f"image_size {tuple(self.gen.image_size)} must be divisible by {divisor} "
                f"for a depth-{self.model.backbone_depth} backbone"
            )
        if self.gen.panoptic_mode and self.model.num_classes != self.gen.num_classes:
            raise ConfigError(
                f"panoptic data has {self.gen.num_classes} classes but model.num_classes "
                f"is {self.model.num_classes}"
            )
        return self


def _coerce(value: Any, default: Any) -> Any:
    """Bring JSON values back to the type of the dataclass default."""
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _from_dict(cls: type, data: Dict[str, Any], prefix: str) -> Any:
    kwargs: Dict[str, Any] = {}
    fields = {field.name: field for field in dataclasses.fields(cls)}
    defaults = cls()
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"Unknown config key '{prefix}{key}'")
        default = getattr(defaults, key)
        if dataclasses.is_dataclass(default):
            if not isinstance(value, dict):
                raise ConfigError(f"Config key '{prefix}{key}' must be an object")
            kwargs[key] = _from_dict(type(default), value, f"{prefix}{key}.")
        else:
            kwargs[key] = _coerce(value, default)
    return cls(**kwargs)


def _merge(base: Dict[str, Any], update: Dict[str, Any], prefix: str = "") -> None:
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"Unknown config key '{prefix}{key}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"Config key '{prefix}{key}' must be an object")
            _merge(base[key], value, f"{prefix}{key}.")
        else:
            base[key] = value


def parse_override_value(raw: str) -> Any:
    """Interpret a CLI override as JSON, falling back to the raw string."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def run_config_to_dict(config: RunConfig) -> Dict[str, Any]:
    return dataclasses.asdict(config)


def load_run_config(
    path: Optional[Path] = None,
    overrides: Iterable[Tuple[str, str]] = (),
    *,
    seed: Optional[int] = None,
    deterministic: Optional[bool] = None,
) -> RunConfig:
    """Resolve defaults, then the JSON file at ``path``, then dotted CLI overrides."""
    merged = run_config_to_dict(RunConfig())
    if path is not None:
        try:
            file_data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"Config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"Config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(file_data, dict):
            raise ConfigError(f"Config file {path} must contain a JSON object")
        _merge(merged, file_data)

    for dotted_key, raw_value in overrides:
        parts = dotted_key.split(".")
        nested: Dict[str, Any] = {}
        cursor = nested
        for part in parts[:-1]:
            cursor = cursor.setdefault(part, {})
        cursor[parts[-1]] = parse_override_value(raw_value)
        _merge(merged, nested)

    if seed is not None:
        merged["seed"] = seed
    if deterministic is not None:
        merged["deterministic"] = deterministic

    config: RunConfig = _from_dict(RunConfig, merged, "")
    if config.seed is not None:
        config.gen.seed = config.seed
        config.train.seed = config.seed
        config.infer.seed = config.seed
    if config.gen.panoptic_mode and config.model.num_classes == 1:
        LOGGER.info("Panoptic data requested; enabling %d-class semantic branch", config.gen.num_classes)
        config.model.num_classes = config.gen.num_classes
    return config.validate()


def write_run_config(config: RunConfig, path: Path) -> Path:
    """Echo the resolved configuration so the run can be repeated with ``--config``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(run_config_to_dict(config), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def config_from_dict(cls: type, data: Dict[str, Any]) -> Any:
    """Rebuild a section config (e.g. ``ModelConfig``) from its ``asdict`` form."""
    return _from_dict(cls, copy.deepcopy(data), "")


def list_config_keys() -> List[str]:
    """Return every dotted key accepted by config files and overrides."""
    keys: List[str] = []

    def _walk(data: Dict[str, Any], prefix: str) -> None:
        for key, value in data.items():
            if isinstance(value, dict):
                _walk(value, f"{prefix}{key}.")
            else:
                keys.append(f"{prefix}{key}")

    _walk(run_config_to_dict(RunConfig()), "")
    return sorted(keys)


__all__ = [
    "BACKGROUND_CLASS",
    "CAPSULE_CLASS",
    "ConfigError",
    "ELLIPSE_CLASS",
    "GenConfig",
    "InferenceConfig",
    "LossConfig",
    "ModelConfig",
    "RunConfig",
    "TEXTURE_CLASS",
    "TrainConfig",
    "config_from_dict",
    "list_config_keys",
    "load_run_config",
    "parse_override_value",
    "run_config_to_dict",
    "write_run_config",
]
