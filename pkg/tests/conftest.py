"""Shared tiny configurations so every test runs in well under a second on CPU."""

from __future__ import annotations

import dataclasses
from typing import Callable

import numpy as np
import pytest
import torch

from adaptis.config.settings import GenConfig, InferenceConfig, ModelConfig, TrainConfig
from adaptis.data.toygen import Dataset, generate_dataset
from adaptis.model.network import AdaptISNet


def small_gen_config(**overrides) -> GenConfig:
    base = GenConfig(
        image_size=(32, 32),
        objects_per_image=(2, 3),
        object_length_range=(10.0, 16.0),
        object_width_range=(4.0, 6.0),
        border_width=1.0,
        blur_sigma_range=(0.0, 0.5),
        noise_amplitude_range=(0.0, 8.0),
        n_train=4,
        n_test=2,
        seed=5,
    )
    return dataclasses.replace(base, **overrides).validate()


def small_model_config(**overrides) -> ModelConfig:
    base = ModelConfig(
        backbone_depth=2,
        backbone_width=8,
        controller_widths=(16,),
        head_widths=(8, 8, 8),
        coordconv_radius=16.0,
        segmentation_head_width=8,
    )
    return dataclasses.replace(base, **overrides).validate()


def small_train_config(**overrides) -> TrainConfig:
    base = TrainConfig(
        epochs=1,
        batch_size=2,
        points_per_image=2,
        proposal_candidates_per_object=5,
        proposal_epochs=1,
        checkpoint_every=1,
        seed=3,
    )
    return dataclasses.replace(base, **overrides).validate()


@pytest.fixture
def gen_config() -> GenConfig:
    return small_gen_config()


@pytest.fixture
def panoptic_gen_config() -> GenConfig:
    return small_gen_config(panoptic_mode=True)


@pytest.fixture
def dataset(gen_config: GenConfig) -> Dataset:
    return generate_dataset(gen_config, "train")


@pytest.fixture
def panoptic_dataset(panoptic_gen_config: GenConfig) -> Dataset:
    return generate_dataset(panoptic_gen_config, "train")


@pytest.fixture
def model() -> AdaptISNet:
    torch.manual_seed(0)
    return AdaptISNet(small_model_config()).eval()


@pytest.fixture
def panoptic_model() -> AdaptISNet:
    torch.manual_seed(0)
    return AdaptISNet(small_model_config(num_classes=4)).eval()


@pytest.fixture
def train_config() -> TrainConfig:
    return small_train_config()


@pytest.fixture
def infer_config() -> InferenceConfig:
    return InferenceConfig(max_iters=10, random_candidates=3, chunk_size=8).validate()


class StackPredictor:
    """Confidence source that returns scripted maps keyed by the pixel of each point."""

    def __init__(self, lookup: Callable[[int, int], np.ndarray], height: int, width: int) -> None:
        self.lookup = lookup
        self.height = height
        self.width = width
        self.calls = 0

    def __call__(self, points) -> np.ndarray:
        self.calls += len(points)
        return np.stack([self.lookup(*p.pixel) for p in points]) if points else np.zeros((0, self.height, self.width))
