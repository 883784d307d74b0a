"""Tests for dataset-level prediction, prediction storage and scoring."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
import pytest

from adaptis.config.settings import InferenceConfig
from adaptis.core.evaluation import (
    ground_truth_prediction,
    evaluate_predictions,
    mask_consistency,
    predict_dataset,
    read_prediction,
    write_metrics,
    write_prediction,
)
from adaptis.data.toygen import Dataset
from adaptis.model.network import AdaptISNet


def test_prediction_files_round_trip(dataset: Dataset, tmp_path: Path) -> None:
    """Id maps, the segment table and optional confidences survive a round trip."""

    sample = dataset[0]
    stored = ground_truth_prediction(sample)
    confidences = np.random.default_rng(0).random((len(sample.instances), sample.height, sample.width))
    stored = dataclasses.replace(stored, confidences=confidences.astype(np.float32))
    write_prediction(tmp_path, stored)

    loaded = read_prediction(tmp_path, sample.sample_id)
    np.testing.assert_array_equal(loaded.instance_map, stored.instance_map)
    assert loaded.panoptic == stored.panoptic
    assert loaded.segments == stored.segments
    np.testing.assert_allclose(loaded.confidences, stored.confidences)


def test_read_prediction_reports_missing_files(dataset: Dataset, tmp_path: Path) -> None:
    """A partially written prediction names the missing file."""

    sample = dataset[0]
    write_prediction(tmp_path, ground_truth_prediction(sample))
    (tmp_path / f"{sample.sample_id}_segments.json").unlink()
    with pytest.raises(FileNotFoundError, match="segments"):
        read_prediction(tmp_path, sample.sample_id)


@pytest.mark.parametrize("fixture_name", ["dataset", "panoptic_dataset"])
def test_ground_truth_as_prediction_is_perfect(fixture_name: str, request: pytest.FixtureRequest) -> None:
    """Scoring ground truth against itself gives AP, PQ and mIoU of one."""

    data: Dataset = request.getfixturevalue(fixture_name)
    record = evaluate_predictions(((s, ground_truth_prediction(s)) for s in data), data.gen_config)
    assert record["images"] == len(data)
    assert all(value == pytest.approx(1.0) for value in record["instances"]["ap"].values())
    assert record["panoptic"]["pq"] == pytest.approx(1.0)
    assert record["panoptic"]["pq_things"] == pytest.approx(1.0)
    assert record["miou"] == pytest.approx(1.0)
    assert record["instances"]["interpolation"] == "all-point"


def test_empty_predictions_score_zero_ap(dataset: Dataset) -> None:
    """An image set with no predicted instances has zero AP."""

    def _blank(sample):
        stored = ground_truth_prediction(sample)
        blank = np.zeros_like(stored.instance_map)
        panoptic = dataclasses.replace(
            stored.panoptic, class_map=np.zeros_like(stored.panoptic.class_map), instance_map=blank
        )
        return dataclasses.replace(stored, instance_map=blank, panoptic=panoptic, segments=[])

    record = evaluate_predictions(((s, _blank(s)) for s in dataset), dataset.gen_config, (0.5,))
    assert record["instances"]["ap"] == {"0.50": 0.0}
    assert record["panoptic"]["pq_things"] == 0.0


def test_predict_dataset_is_ordered_and_reproducible(
    model: AdaptISNet, dataset: Dataset, infer_config: InferenceConfig
) -> None:
    """Predictions come back in dataset order and repeat exactly for the same seed."""

    first = list(predict_dataset(model, dataset, infer_config, progress=False))
    second = list(predict_dataset(model, dataset, infer_config, progress=False))
    assert [s.sample_id for s, _ in first] == [s.sample_id for s in dataset]
    for (_, a), (_, b) in zip(first, second):
        assert a.instance_map.shape == (32, 32)
        np.testing.assert_array_equal(a.instance_map, b.instance_map)
        assert a.confidences is None

    record = evaluate_predictions(first, dataset.gen_config)
    assert set(record["instances"]["ap"]) == {"0.50", "0.60", "0.70", "0.80", "0.90"}
    assert 0.0 <= record["panoptic"]["pq"] <= 1.0


def test_predict_dataset_keeps_confidences_when_asked(
    model: AdaptISNet, dataset: Dataset, infer_config: InferenceConfig
) -> None:
    """Stored confidences hold one map per kept instance."""

    config = dataclasses.replace(infer_config, save_confidences=True)
    for _, stored in predict_dataset(model, dataset, config, progress=False):
        assert stored.confidences is not None
        assert stored.confidences.shape[1:] == (32, 32)
        assert stored.confidences.shape[0] == len(stored.segments)


def test_panoptic_predictions_have_consistent_maps(
    panoptic_model: AdaptISNet, panoptic_dataset: Dataset, infer_config: InferenceConfig
) -> None:
    """Panoptic predictions only place instance ids on thing classes."""

    for _, stored in predict_dataset(panoptic_model, panoptic_dataset, infer_config, progress=False):
        assert stored.panoptic.check_invariants(panoptic_dataset.gen_config.thing_classes) == []


def test_mask_consistency_counts_objects(model: AdaptISNet, dataset: Dataset) -> None:
    """The consistency check stops at the requested number of objects."""

    result = mask_consistency(model, dataset, n_objects=3, seed=1, chunk_size=4)
    assert result["objects"] == 3
    assert 0.0 <= result["mean_pairwise_iou"] <= 1.0


def test_mask_consistency_warns_when_short(model: AdaptISNet, dataset: Dataset, caplog) -> None:
    """Asking for more objects than exist logs a warning."""

    total = sum(len(s.instances) for s in dataset)
    result = mask_consistency(model, dataset, n_objects=total + 5, chunk_size=4)
    assert result["objects"] == total
    assert "consistency check" in caplog.text


class _PointRecorder:
    """Stands in for ``Predictor`` and remembers every point pair it is asked about."""

    calls: list = []

    def __init__(self, model, image, chunk_size=64) -> None:
        self.shape = image.shape[:2]

    def __call__(self, points):
        _PointRecorder.calls.append([(p.x, p.y) for p in points])
        return np.ones((len(points),) + self.shape, dtype=np.float32)


def test_mask_consistency_points_are_distinct(
    monkeypatch: pytest.MonkeyPatch, model: AdaptISNet, dataset: Dataset
) -> None:
    """Both points of a pair are different pixels of the object; one-pixel objects reuse their only pixel."""

    monkeypatch.setattr("adaptis.core.evaluation.Predictor", _PointRecorder)
    _PointRecorder.calls = []
    total = sum(len(s.instances) for s in dataset)
    mask_consistency(model, dataset, n_objects=total, seed=2)
    masks = [mask for sample in dataset for mask in sample.instances]
    assert len(_PointRecorder.calls) == total
    for mask, (first, second) in zip(masks, _PointRecorder.calls):
        assert first != second or mask.sum() == 1
        for x, y in (first, second):
            assert mask[int(y), int(x)]

    sample = dataset[0]
    dot = np.zeros(sample.semantic_map.shape, dtype=bool)
    dot[5, 7] = True
    single = Dataset([dataclasses.replace(sample, instances=[dot], instance_classes=[])], dataset.gen_config)
    _PointRecorder.calls = []
    result = mask_consistency(model, single, n_objects=1)
    assert _PointRecorder.calls == [[(7.0, 5.0), (7.0, 5.0)]]
    assert result["mean_pairwise_iou"] == 1.0


def test_write_metrics(tmp_path: Path) -> None:
    """Metrics are written as sorted JSON."""

    path = write_metrics(tmp_path / "out" / "metrics.json", {"miou": 0.5, "images": 2})
    assert path.read_text(encoding="utf-8").startswith('{\n  "images": 2')
