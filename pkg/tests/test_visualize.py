"""Tests for the PNG renderings."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from adaptis.config.settings import InferenceConfig
from adaptis.core.visualize import (
    blend,
    colorize_confidence,
    colorize_instances,
    mark_points,
    write_visualizations,
)
from adaptis.data.toygen import Dataset
from adaptis.model.network import AdaptISNet
from adaptis.structures import PointProposal


def test_colorizers_keep_shape_and_dtype() -> None:
    """Colorized maps are uint8 RGB images of the input size."""

    confidence = np.linspace(0.0, 1.0, 12).reshape(3, 4)
    rgb = colorize_confidence(confidence)
    assert rgb.shape == (3, 4, 3) and rgb.dtype == np.uint8
    instances = colorize_instances(np.array([[0, 1], [2, 0]]))
    assert (instances[0, 0] == 0).all() and instances[0, 1].any()
    assert blend(rgb, rgb).tolist() == rgb.tolist()


def test_mark_points_draws_a_cross() -> None:
    """A marked point colors its pixel and clips at the border."""

    marked = mark_points(np.zeros((5, 5, 3), np.uint8), [PointProposal(0.5, 0.5)], color=(9, 9, 9))
    assert tuple(marked[0, 0]) == (9, 9, 9)
    assert tuple(marked[1, 0]) == (9, 9, 9) and tuple(marked[0, 1]) == (9, 9, 9)
    assert tuple(marked[2, 2]) == (0, 0, 0)


def test_one_point_gives_one_heatmap(
    model: AdaptISNet, dataset: Dataset, infer_config: InferenceConfig, tmp_path: Path
) -> None:
    """Explicit points render one heatmap each plus the instance and proposal views."""

    image = dataset[0].image
    written = write_visualizations(
        model, image, tmp_path, points=[PointProposal(10.0, 12.0)], config=infer_config, gen_config=dataset.gen_config
    )
    names = sorted(path.name for path in written)
    assert names == ["image_heatmap_000.png", "image_instances.png", "image_proposals.png"]
    for path in written:
        with Image.open(path) as handle:
            assert handle.size == (32, 32)
            assert handle.mode == "RGB"


def test_points_default_to_committed_proposals(
    model: AdaptISNet, dataset: Dataset, infer_config: InferenceConfig, tmp_path: Path
) -> None:
    """Without points the heatmaps follow the committed inference proposals."""

    written = write_visualizations(
        model, dataset[0].image, tmp_path, config=infer_config, gen_config=dataset.gen_config, prefix="auto"
    )
    heatmaps = [p for p in written if "_heatmap_" in p.name]
    assert all(p.name.startswith("auto_") for p in written)
    assert len(heatmaps) <= infer_config.max_iters
    assert (tmp_path / "auto_proposals.png").is_file()


def test_panoptic_model_adds_panoptic_view(
    panoptic_model: AdaptISNet, panoptic_dataset: Dataset, infer_config: InferenceConfig, tmp_path: Path
) -> None:
    """Models with a semantic branch also render the panoptic map."""

    written = write_visualizations(
        panoptic_model,
        panoptic_dataset[0].image,
        tmp_path,
        points=[],
        config=infer_config,
        gen_config=panoptic_dataset.gen_config,
    )
    assert "image_panoptic.png" in {p.name for p in written}
    assert not [p for p in written if "_heatmap_" in p.name]


def test_out_of_bounds_point_is_rejected(
    model: AdaptISNet, dataset: Dataset, infer_config: InferenceConfig, tmp_path: Path
) -> None:
    """Points outside the image are a usage error."""

    with pytest.raises(ValueError, match="outside"):
        write_visualizations(model, dataset[0].image, tmp_path, points=[PointProposal(40.0, 3.0)], config=infer_config)
