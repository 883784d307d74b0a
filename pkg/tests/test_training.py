"""Tests for point sampling, joint training and proposal-branch training."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from adaptis.config.settings import LossConfig, TrainConfig
from adaptis.core.history import METRICS_LOG_NAME, parse_metrics_log
from adaptis.core.losses import build_loss
from adaptis.core.metrics import mask_iou
from adaptis.core.training import (
    NonFiniteLossError,
    ToyTrainingSet,
    augment_sample,
    build_proposal_targets,
    positive_count,
    rank_candidates,
    sample_point_proposals,
    train_adaptis,
    train_proposal_branch,
)
from adaptis.data.toygen import Dataset, ToySample, generate_dataset
from adaptis.model.checkpoint import load_checkpoint, parameter_digest
from adaptis.model.network import AdaptISNet, Predictor, prepare_image
from adaptis.structures import PointProposal
from tests.conftest import small_gen_config, small_model_config, small_train_config


def _two_object_sample() -> ToySample:
    small = np.zeros((32, 32), dtype=bool)
    small[2:6, 2:6] = True
    large = np.zeros((32, 32), dtype=bool)
    large[10:30, 6:28] = True
    semantic = (small | large).astype(np.uint8)
    return ToySample(
        image=np.zeros((32, 32, 3), dtype=np.uint8),
        instances=[small, large],
        semantic_map=semantic,
        sample_id="two",
    )


def test_single_point_lies_in_its_object() -> None:
    """With one object the sampled point is inside the paired mask."""

    sample = _two_object_sample()
    sample.instances = sample.instances[:1]
    sample.instance_classes = sample.instance_classes[:1]
    [(point, mask)] = sample_point_proposals(sample, 1, np.random.default_rng(0))
    assert mask[point.pixel]
    assert mask is sample.instances[0]


def test_sampling_is_stratified_by_object() -> None:
    """Objects are picked uniformly no matter how different their areas are."""

    sample = _two_object_sample()
    draws = sample_point_proposals(sample, 1000, np.random.default_rng(1))
    small_hits = sum(mask is sample.instances[0] for _, mask in draws)
    assert abs(small_hits - 500) <= 3 * np.sqrt(1000 * 0.25)
    for point, mask in draws:
        assert mask[point.pixel]

    counts = np.bincount(
        [int(mask is sample.instances[1]) for _, mask in sample_point_proposals(sample, 10_000, np.random.default_rng(2))],
        minlength=2,
    )
    assert chisquare(counts).pvalue > 0.01


def test_sampling_is_reproducible_and_requires_objects() -> None:
    """A fixed seed gives the same points; an empty sample is an error."""

    sample = _two_object_sample()
    a = [p for p, _ in sample_point_proposals(sample, 6, np.random.default_rng(9))]
    b = [p for p, _ in sample_point_proposals(sample, 6, np.random.default_rng(9))]
    assert a == b
    empty = ToySample(np.zeros((8, 8, 3), np.uint8), [], np.zeros((8, 8), np.uint8), "empty")
    with pytest.raises(ValueError):
        sample_point_proposals(empty, 1, np.random.default_rng(0))


def test_augmentation_keeps_masks_aligned(dataset: Dataset, train_config: TrainConfig) -> None:
    """Flips and rotations move the image, masks and semantic map together."""

    for seed in range(8):
        sample = dataset[0]
        augmented = augment_sample(sample, np.random.default_rng(seed), train_config)
        union = np.logical_or.reduce(augmented.instances)
        assert np.array_equal(union, augmented.semantic_map > 0)
        assert sorted(m.sum() for m in augmented.instances) == sorted(m.sum() for m in sample.instances)


def test_training_set_items(dataset: Dataset, train_config: TrainConfig) -> None:
    """Items hold an image, K points and K masks that contain their points."""

    items = ToyTrainingSet(dataset, train_config)
    items.set_epoch(1)
    item = items[0]
    assert item["image"].shape == (3, 32, 32)
    assert item["points"].shape == (train_config.points_per_image, 2)
    assert item["masks"].shape == (train_config.points_per_image, 32, 32)
    for (x, y), mask in zip(item["points"].tolist(), item["masks"]):
        assert mask[int(y), int(x)] == 1.0
    again = items[0]
    assert torch.equal(item["points"], again["points"])


def _fresh_model() -> AdaptISNet:
    torch.manual_seed(0)
    return AdaptISNet(small_model_config())


def test_one_epoch_logs_and_checkpoints(dataset: Dataset, train_config: TrainConfig, tmp_path: Path) -> None:
    """Every step is logged and the final epoch is checkpointed."""

    result = train_adaptis(dataset, _fresh_model(), train_config, tmp_path, progress=False)
    steps = -(-len(dataset) // train_config.batch_size)
    assert len(result.step_losses) == steps
    assert all(np.isfinite(result.step_losses))
    assert result.checkpoint == tmp_path / "checkpoints" / "epoch_1.pt"
    records = parse_metrics_log(tmp_path / METRICS_LOG_NAME)
    assert [r.epoch for r in records] == [1]
    assert records[0].steps == steps
    _, metadata = load_checkpoint(result.checkpoint)
    assert metadata["stage"] == "adaptis"


def test_panoptic_training_includes_semantic_term(panoptic_dataset: Dataset, train_config: TrainConfig) -> None:
    """A model with a semantic branch also reports the cross-entropy term."""

    torch.manual_seed(0)
    model = AdaptISNet(small_model_config(num_classes=4))
    result = train_adaptis(panoptic_dataset, model, train_config, progress=False)
    assert set(result.records[0].terms) == {"instance", "semantic"}


def test_training_is_reproducible(dataset: Dataset, train_config: TrainConfig) -> None:
    """Two serial runs with equal seeds produce the same loss curve."""

    cfg = dataclasses.replace(train_config, epochs=2)
    first = train_adaptis(dataset, _fresh_model(), cfg, progress=False).step_losses
    second = train_adaptis(dataset, _fresh_model(), cfg, progress=False).step_losses
    assert np.allclose(first, second, atol=1e-6, rtol=0)


def test_nan_loss_aborts_with_diagnostics(
    dataset: Dataset, train_config: TrainConfig, monkeypatch: pytest.MonkeyPatch
) -> None:
    """A non-finite loss stops training and reports where it happened."""

    monkeypatch.setattr(
        "adaptis.core.training.build_loss",
        lambda cfg: lambda pred, target, valid=None: (pred * float("nan")).mean(),
    )
    with pytest.raises(NonFiniteLossError) as info:
        train_adaptis(dataset, _fresh_model(), train_config, progress=False)
    assert info.value.epoch == 1
    assert info.value.batch_index == 0
    assert "instance" in info.value.terms


def test_empty_dataset_rejected(dataset: Dataset, train_config: TrainConfig) -> None:
    """Training needs at least one sample."""

    empty = Dataset(samples=[], gen_config=dataset.gen_config)
    with pytest.raises(ValueError):
        train_adaptis(empty, _fresh_model(), train_config, progress=False)


def test_positive_share_and_ranking() -> None:
    """The top fifth (rounded up) is positive; ties keep candidate order."""

    assert positive_count(10) == 2
    assert positive_count(48) == 10
    assert positive_count(1) == 1
    assert rank_candidates(np.array([0.2, 0.9, 0.9, 0.1])).tolist() == [1, 2, 0, 3]


def _oracle_confidences(sample: ToySample):
    owner = sample.instance_map()

    def predict(predictor, points):
        return np.stack([(owner == owner[p.pixel]).astype(np.float32) for p in points])

    return predict


def test_perfect_model_labels_exactly_top_fifth(
    model: AdaptISNet, monkeypatch: pytest.MonkeyPatch
) -> None:
    """With oracle masks every object gets ceil(0.2·n) positives."""

    sample = _two_object_sample()
    monkeypatch.setattr("adaptis.core.training.predict_confidences", _oracle_confidences(sample))
    targets = build_proposal_targets(model, sample, 10, np.random.default_rng(0))
    n_objects = len(sample.instances)
    assert targets.positives == 2 * n_objects
    assert targets.negatives == 8 * n_objects
    assert int(targets.target.sum()) == 2 * n_objects
    assert int(targets.valid.sum()) == 10 * n_objects
    assert not (targets.target.astype(bool) & ~targets.valid).any()


def test_degenerate_object_is_all_negative(
    dataset: Dataset, model: AdaptISNet, monkeypatch: pytest.MonkeyPatch
) -> None:
    """An object whose candidates all have IoU 0 gets no positive label."""

    sample = dataset[0]
    monkeypatch.setattr(
        "adaptis.core.training.predict_confidences",
        lambda predictor, points: np.zeros((len(points), sample.height, sample.width), dtype=np.float32),
    )
    targets = build_proposal_targets(model, sample, 5, np.random.default_rng(0))
    assert targets.positives == 0
    assert targets.target.sum() == 0
    assert targets.valid.any()


def test_proposal_targets_are_reproducible(dataset: Dataset, model: AdaptISNet) -> None:
    """Equal seeds give equal labels."""

    a = build_proposal_targets(model, dataset[0], 5, np.random.default_rng(4))
    b = build_proposal_targets(model, dataset[0], 5, np.random.default_rng(4))
    assert np.array_equal(a.target, b.target) and np.array_equal(a.valid, b.valid)


def test_proposal_training_freezes_everything_else(
    dataset: Dataset, train_config: TrainConfig, tmp_path: Path
) -> None:
    """Only the proposal head changes; other weights stay bit-identical."""

    model = _fresh_model().eval()
    frozen = parameter_digest(model, exclude=("proposal_head.",))
    head_before = parameter_digest(model.proposal_head)
    result = train_proposal_branch(model, dataset, train_config, tmp_path, progress=False)
    assert parameter_digest(model, exclude=("proposal_head.",)) == frozen
    assert parameter_digest(model.proposal_head) != head_before
    assert all(p.requires_grad for p in model.parameters())
    loaded, metadata = load_checkpoint(result.checkpoint)
    assert metadata["stage"] == "proposals"
    assert metadata["extra"]["frozen_digest"] == frozen
    scores = Predictor(loaded, dataset[0].image).proposal_scores()
    assert scores.min() >= 0.0 and scores.max() <= 1.0
    assert [r.stage for r in parse_metrics_log(tmp_path / METRICS_LOG_NAME)] == ["proposals"]


def test_loss_falls_over_five_epochs() -> None:
    """With the default loss the median step loss of epoch 5 is below that of epoch 1."""

    data = generate_dataset(small_gen_config(n_train=16), "train")
    cfg = small_train_config(epochs=5, batch_size=4, points_per_image=4, lr=2e-3)
    result = train_adaptis(data, _fresh_model(), cfg, progress=False)
    assert cfg.loss.kind == "nfl"
    assert [r.epoch for r in result.records] == [1, 2, 3, 4, 5]
    assert result.records[-1].median_loss < result.records[0].median_loss


def _two_block_sample() -> ToySample:
    left = np.zeros((32, 32), dtype=bool)
    left[4:28, 2:14] = True
    right = np.zeros((32, 32), dtype=bool)
    right[4:28, 18:30] = True
    image = np.zeros((32, 32, 3), dtype=np.uint8)
    image[left] = (220, 70, 70)
    image[right] = (70, 220, 70)
    return ToySample(image=image, instances=[left, right], semantic_map=(left | right).astype(np.uint8), sample_id="blocks")


@pytest.fixture(scope="module")
def overfit():
    """A model trained for 200 steps on one image with augmentation off."""

    sample = _two_block_sample()
    data = Dataset([sample], small_gen_config())
    cfg = small_train_config(
        epochs=200, batch_size=1, points_per_image=6, lr=2e-3, hflip=False, vflip=False, rot90=False
    )
    torch.manual_seed(0)
    model = AdaptISNet(small_model_config(backbone_width=16, head_widths=(16, 16)))
    result = train_adaptis(data, model, cfg, progress=False)
    assert len(result.step_losses) == 200
    return model.eval(), sample


def test_single_image_overfits(overfit) -> None:
    """Each block is recovered from an interior point with mask IoU above 0.95."""

    model, sample = overfit
    maps = Predictor(model, sample.image)([PointProposal(8.0, 16.0), PointProposal(24.0, 16.0)])
    for confidence, mask in zip(maps, sample.instances):
        assert mask_iou(confidence > 0.5, mask) > 0.95


@pytest.mark.parametrize("kind", ["nfl", "fl", "bce"])
def test_loss_is_paired_with_the_clicked_object(overfit, kind: str) -> None:
    """Swapping the target masks of two points makes the loss of a trained model rise."""

    model, sample = overfit
    loss_fn = build_loss(LossConfig(kind=kind))
    image = prepare_image(sample.image).unsqueeze(0)
    points = torch.tensor([[[8.0, 16.0], [24.0, 16.0]]])
    masks = torch.from_numpy(np.stack(sample.instances)).float()
    with torch.no_grad():
        confidences = model(image, points)["instances"][0]
        paired = float(loss_fn(confidences, masks))
        swapped = float(loss_fn(confidences, masks.flip(0)))
    assert swapped > 2 * paired


def test_proposal_loss_falls_over_five_epochs(dataset: Dataset) -> None:
    """The proposal head fits its fixed targets: the last epoch's median BCE beats the first."""

    cfg = small_train_config(batch_size=len(dataset), proposal_epochs=5, proposal_lr=5e-3)
    result = train_proposal_branch(_fresh_model().eval(), dataset, cfg, progress=False)
    assert [r.stage for r in result.records] == ["proposals"] * 5
    assert result.records[-1].median_loss < result.records[0].median_loss
