"""Tests for configuration loading, overrides and environment helpers."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from adaptis.config.environment import default_output_dir, resolve_device
from adaptis.config.settings import (
    ConfigError,
    GenConfig,
    InferenceConfig,
    LossConfig,
    ModelConfig,
    RunConfig,
    TrainConfig,
    config_from_dict,
    list_config_keys,
    load_run_config,
    parse_override_value,
    write_run_config,
)


def test_defaults_are_valid() -> None:
    """The default configuration describes a runnable class-agnostic experiment."""

    config = load_run_config()
    assert config.model.num_classes == 1
    assert not config.model.semantic_enabled
    assert config.train.loss.kind == "nfl"
    assert config.infer.threshold == 0.5
    assert config.infer.strategy == "auto"
    assert config.model.coordconv_radius == 48.0


def test_file_then_overrides(tmp_path: Path) -> None:
    """Overrides win over the config file, which wins over defaults."""

    path = tmp_path / "run.json"
    path.write_text(json.dumps({"train": {"epochs": 3, "loss": {"kind": "fl"}}, "infer": {"max_iters": 5}}))
    config = load_run_config(path, [("infer.max_iters", "9"), ("train.loss.gamma", "1.5")])
    assert config.train.epochs == 3
    assert config.train.loss.kind == "fl"
    assert config.train.loss.gamma == 1.5
    assert config.infer.max_iters == 9


def test_seed_propagates_to_every_section() -> None:
    """A top-level seed reaches generation, training and inference."""

    config = load_run_config(seed=11, deterministic=True)
    assert (config.gen.seed, config.train.seed, config.infer.seed) == (11, 11, 11)
    assert config.deterministic


def test_unknown_keys_are_rejected(tmp_path: Path) -> None:
    """Typos fail loudly instead of being silently ignored."""

    with pytest.raises(ConfigError, match="train.epoch"):
        load_run_config(overrides=[("train.epoch", "3")])
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"model": {"widths": 3}}))
    with pytest.raises(ConfigError, match="model.widths"):
        load_run_config(path)


def test_bad_config_files(tmp_path: Path) -> None:
    """Missing, malformed and non-object files are config errors."""

    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{")
    with pytest.raises(ConfigError):
        load_run_config(broken)
    listing = tmp_path / "list.json"
    listing.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_run_config(listing)


@pytest.mark.parametrize(
    "section",
    [
        GenConfig(objects_per_image=(5, 2)),
        GenConfig(image_size=(16, 16), object_width_range=(8.0, 12.0)),
        ModelConfig(coordconv_radius=0.0),
        LossConfig(kind="dice"),
        LossConfig(epsilon=0.5),
        TrainConfig(points_per_image=0),
        TrainConfig(epochs=5, lr_milestones=(3, 2)),
        InferenceConfig(threshold=1.0),
        InferenceConfig(strategy="sliding"),
    ],
)
def test_section_validation(section) -> None:
    """Out-of-range values are rejected by each section."""

    with pytest.raises(ConfigError):
        section.validate()


def test_image_size_must_match_backbone_stride() -> None:
    """The image must be divisible by the backbone's total downsampling."""

    config = RunConfig(gen=GenConfig(image_size=(100, 96)))
    with pytest.raises(ConfigError, match="divisible by 8"):
        config.validate()


def test_panoptic_mode_enables_semantic_branch() -> None:
    """Panoptic data switches the model to one output per class."""

    config = load_run_config(overrides=[("gen.panoptic_mode", "true")])
    assert config.gen.thing_classes == (1, 2)
    assert config.gen.stuff_classes == (0, 3)
    assert config.model.num_classes == 4
    assert config.model.semantic_enabled


def test_written_config_reloads_identically(tmp_path: Path) -> None:
    """The echoed config.json reproduces the resolved configuration."""

    config = load_run_config(overrides=[("train.epochs", "2"), ("infer.ap_thresholds", "[0.5, 0.75]")], seed=4)
    path = write_run_config(config, tmp_path / "out" / "config.json")
    reloaded = load_run_config(path)
    assert reloaded == config
    assert reloaded.infer.ap_thresholds == (0.5, 0.75)


def test_config_from_dict_and_key_listing() -> None:
    """Section configs rebuild from their dict form; every dotted key is listed."""

    model = config_from_dict(ModelConfig, {"head_widths": [4, 4], "num_classes": 3})
    assert model.head_widths == (4, 4)
    keys = list_config_keys()
    assert "train.loss.kind" in keys
    assert "infer.threshold" in keys


def test_parse_override_value() -> None:
    """JSON literals are decoded and anything else stays a string."""

    assert parse_override_value("3") == 3
    assert parse_override_value("false") is False
    assert parse_override_value("[1, 2]") == [1, 2]
    assert parse_override_value("nfl") == "nfl"


def test_default_output_dir(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    """The output root comes from the environment when no --out is given."""

    monkeypatch.setattr("adaptis.config.environment.load_local_env", lambda *args, **kwargs: None)
    monkeypatch.delenv("ADAPTIS_OUTPUT_ROOT", raising=False)
    assert default_output_dir("train") is None
    monkeypatch.setenv("ADAPTIS_OUTPUT_ROOT", str(tmp_path))
    assert default_output_dir("train") == tmp_path / "train"


def test_resolve_device_prefers_explicit_cpu(monkeypatch: pytest.MonkeyPatch) -> None:
    """Explicit devices pass through; auto honours the environment."""

    assert resolve_device("cpu") == "cpu"
    monkeypatch.setenv("ADAPTIS_DEVICE", "cpu")
    assert resolve_device("auto") == "cpu"
