"""Point sampling, joint AdaptIS training and frozen-backbone training of the proposal branch."""

from __future__ import annotations

import dataclasses
import logging
import random
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader
from torch.utils.data import Dataset as TorchDataset
from tqdm import tqdm

from adaptis.config.settings import TrainConfig
from adaptis.core.history import METRICS_LOG_NAME, EpochRecord, append_record
from adaptis.core.losses import bce_loss, build_loss
from adaptis.core.metrics import mask_iou
from adaptis.data.toygen import Dataset, ToySample
from adaptis.model.checkpoint import parameter_digest, save_checkpoint
from adaptis.model.network import AdaptISNet, Predictor, prepare_image
from adaptis.structures import PointProposal

LOGGER = logging.getLogger(__name__)

PROPOSAL_HEAD_PREFIX = "proposal_head."
POSITIVE_SHARE = (1, 5)


class NonFiniteLossError(RuntimeError):
    """Raised when a training step produces a NaN or infinite loss."""

    def __init__(self, stage: str, epoch: int, batch_index: int, terms: Dict[str, float]) -> None:
        self.stage = stage
        self.epoch = epoch
        self.batch_index = batch_index
        self.terms = terms
        super().__init__(f"Non-finite {stage} loss at epoch {epoch}, batch {batch_index}: {terms}")


@dataclasses.dataclass
class TrainingResult:
    checkpoint: Optional[Path]
    records: List[EpochRecord]
    step_losses: List[float]


def seed_everything(seed: int, deterministic: bool = False) -> None:
    """Seed python, numpy and torch; ``deterministic`` also pins torch kernels."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False
        torch.backends.cudnn.deterministic = True


def sample_point_proposals(
    sample: ToySample, k: int, rng: np.random.Generator
) -> List[Tuple[PointProposal, np.ndarray]]:
    """Draw ``k`` points with object-level stratification.

    Each draw picks an object uniformly, then a pixel uniformly among that object's
    visible pixels, and pairs the point with the object's mask.
    """
    if not sample.instances:
        raise ValueError(f"sample {sample.sample_id} has no instances to sample points from")
    if k < 1:
        raise ValueError("k must be >= 1")
    pixels = [np.argwhere(mask) for mask in sample.instances]
    draws: List[Tuple[PointProposal, np.ndarray]] = []
    for _ in range(k):
        index = int(rng.integers(len(pixels)))
        row, col = pixels[index][int(rng.integers(len(pixels[index])))]
        draws.append((PointProposal(float(col), float(row)), sample.instances[index]))
    return draws


def augment_sample(sample: ToySample, rng: np.random.Generator, cfg: TrainConfig) -> ToySample:
    """Random flips and 90° rotations applied jointly to the image, masks and semantic map."""
    hflip, vflip, quarter_turns = rng.random() < 0.5, rng.random() < 0.5, int(rng.integers(4))

    def _apply(array: np.ndarray) -> np.ndarray:
        if cfg.hflip and hflip:
            array = array[:, ::-1]
        if cfg.vflip and vflip:
            array = array[::-1, :]
        if cfg.rot90 and quarter_turns and sample.height == sample.width:
            array = np.rot90(array, quarter_turns, axes=(0, 1))
        return np.ascontiguousarray(array)

    return ToySample(
        image=_apply(sample.image),
        instances=[_apply(mask) for mask in sample.instances],
        semantic_map=_apply(sample.semantic_map),
        sample_id=sample.sample_id,
        instance_classes=list(sample.instance_classes),
    )


class ToyTrainingSet(TorchDataset):
    """Yields augmented images with ``K`` sampled points and their paired masks.

    Randomness for item ``i`` in epoch ``e`` comes from ``SeedSequence([seed, e, i])``,
    so batches do not depend on worker scheduling.
    """

    def __init__(self, dataset: Dataset, cfg: TrainConfig) -> None:
        self.dataset = dataset
        self.cfg = cfg
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.dataset)

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, self.epoch, index]))
        sample = augment_sample(self.dataset[index], rng, self.cfg)
        draws = sample_point_proposals(sample, self.cfg.points_per_image, rng)
        return {
            "image": prepare_image(sample.image),
            "points": torch.tensor([[p.x, p.y] for p, _ in draws], dtype=torch.float32),
            "masks": torch.from_numpy(np.stack([m for _, m in draws]).astype(np.float32)),
            "semantic": torch.from_numpy(sample.semantic_map.astype(np.int64)),
        }


def _make_loader(dataset: TorchDataset, cfg: TrainConfig, seed_offset: int = 0) -> DataLoader:
    generator = torch.Generator()
    generator.manual_seed(cfg.seed + seed_offset)
    return DataLoader(
        dataset,
        batch_size=cfg.batch_size,
        shuffle=True,
        num_workers=cfg.num_workers,
        generator=generator,
        drop_last=False,
    )


def _check_finite(stage: str, epoch: int, batch_index: int, total: torch.Tensor, terms: Dict[str, float]) -> None:
    if not torch.isfinite(total):
        LOGGER.error("Aborting %s training: non-finite loss at epoch %d batch %d (%s)", stage, epoch, batch_index, terms)
        raise NonFiniteLossError(stage, epoch, batch_index, terms)


def _epoch_record(stage: str, epoch: int, losses: List[float], lr: float, terms: Dict[str, List[float]], started: float) -> EpochRecord:
    return EpochRecord(
        stage=stage,
        epoch=epoch,
        mean_loss=float(np.mean(losses)) if losses else float("nan"),
        median_loss=float(np.median(losses)) if losses else float("nan"),
        lr=lr,
        steps=len(losses),
        step_losses=[float(v) for v in losses],
        terms={name: float(np.mean(values)) for name, values in terms.items() if values},
        seconds=round(time.perf_counter() - started, 3),
    )


def train_adaptis(
    dataset: Dataset,
    model: AdaptISNet,
    cfg: TrainConfig,
    out_dir: Optional[Path] = None,
    *,
    device: str = "cpu",
    progress: bool = True,
    step_callback: Optional[Callable[[int, int, float], None]] = None,
) -> TrainingResult:
    """Jointly train backbone, controller, instance head and (if present) the semantic head."""
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    model.to(device)
    optimizer = torch.optim.Adam(model.joint_parameters(), lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2))
    scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=list(cfg.lr_milestones), gamma=cfg.lr_gamma)
    instance_loss = build_loss(cfg.loss)
    training_set = ToyTrainingSet(dataset, cfg)
    loader = _make_loader(training_set, cfg)

    records: List[EpochRecord] = []
    step_losses: List[float] = []
    checkpoint: Optional[Path] = None
    LOGGER.info(
        "Training AdaptIS on %d samples for %d epochs (K=%d, loss=%s, coordconv=%s)",
        len(dataset),
        cfg.epochs,
        cfg.points_per_image,
        cfg.loss.kind,
        model.config.use_coordconv,
    )
    for epoch in range(1, cfg.epochs + 1):
        training_set.set_epoch(epoch)
        model.train()
        started = time.perf_counter()
        lr = optimizer.param_groups[0]["lr"]
        losses: List[float] = []
        terms: Dict[str, List[float]] = {"instance": [], "semantic": []}
        batches = tqdm(loader, desc=f"epoch {epoch}/{cfg.epochs}", leave=False, disable=not progress)
        for batch_index, batch in enumerate(batches):
            images = batch["image"].to(device)
            points = batch["points"].to(device)
            masks = batch["masks"].to(device)
            outputs = model(images, points)
            inst = instance_loss(outputs["instances"].flatten(0, 1), masks.flatten(0, 1))
            total = cfg.instance_loss_weight * inst
            step_terms = {"instance": float(inst.detach())}
            if "semantic" in outputs:
                sem = F.cross_entropy(outputs["semantic"], batch["semantic"].to(device))
                total = total + cfg.semantic_loss_weight * sem
                step_terms["semantic"] = float(sem.detach())
            _check_finite("adaptis", epoch, batch_index, total.detach(), step_terms)

            optimizer.zero_grad()
            total.backward()
            optimizer.step()

            value = float(total.detach())
            losses.append(value)
            step_losses.append(value)
            for name, term in step_terms.items():
                terms[name].append(term)
            batches.set_postfix(loss=f"{value:.4f}")
            if step_callback is not None:
                step_callback(epoch, batch_index, value)
        scheduler.step()

        record = _epoch_record("adaptis", epoch, losses, lr, terms, started)
        records.append(record)
        LOGGER.info("epoch %d: median loss %.4f (lr %.2e)", epoch, record.median_loss, lr)
        if out_dir is not None:
            append_record(Path(out_dir) / METRICS_LOG_NAME, record)
            if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
                checkpoint = save_checkpoint(
                    model, Path(out_dir) / "checkpoints" / f"epoch_{epoch}.pt", epoch=epoch, stage="adaptis"
                )
    model.eval()
    return TrainingResult(checkpoint=checkpoint, records=records, step_losses=step_losses)


@dataclasses.dataclass
class ProposalTargets:
    """Binary proposal-quality labels and the mask of pixels that were ever sampled."""

    target: np.ndarray
    valid: np.ndarray
    positives: int = 0
    negatives: int = 0


def predict_confidences(predictor: Predictor, points: Sequence[PointProposal]) -> np.ndarray:
    return predictor(points)


def positive_count(n_candidates: int) -> int:
    """``ceil(0.2 · n)`` in integer arithmetic."""
    numerator, denominator = POSITIVE_SHARE
    return -(-n_candidates * numerator // denominator)


def rank_candidates(ious: np.ndarray) -> np.ndarray:
    """Candidate indices ordered by IoU descending, ties by index."""
    return np.lexsort((np.arange(len(ious)), -np.asarray(ious)))


def build_proposal_targets(
    model: AdaptISNet,
    sample: ToySample,
    n_candidates: int,
    rng: np.random.Generator,
    *,
    threshold: float = 0.5,
    chunk_size: int = 64,
) -> ProposalTargets:
    """Label the top 20% of sampled candidate points per object (by mask IoU) as good proposals."""
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    target = np.zeros((sample.height, sample.width), dtype=np.float32)
    valid = np.zeros((sample.height, sample.width), dtype=bool)
    predictor = Predictor(model, sample.image, chunk_size=chunk_size)
    n_positive = positive_count(n_candidates)
    positives = negatives = 0
    for object_index, mask in enumerate(sample.instances):
        pixels = np.argwhere(mask)
        picks = rng.choice(len(pixels), size=n_candidates, replace=len(pixels) < n_candidates)
        coords = pixels[picks]
        points = [PointProposal(float(col), float(row)) for row, col in coords]
        confidences = predict_confidences(predictor, points)
        ious = np.array([mask_iou(confidence > threshold, mask) for confidence in confidences])
        order = rank_candidates(ious)
        is_positive = np.zeros(n_candidates, dtype=bool)
        if ious.max() > 0:
            is_positive[order[:n_positive]] = True
        else:
            LOGGER.debug("Object %d of %s: every candidate has IoU 0", object_index, sample.sample_id)
        # negatives first so a pixel drawn twice keeps its positive label
        for flag in (False, True):
            rows, cols = coords[is_positive == flag].T
            target[rows, cols] = float(flag)
            valid[rows, cols] = True
        positives += int(is_positive.sum())
        negatives += int((~is_positive).sum())
    return ProposalTargets(target=target, valid=valid, positives=positives, negatives=negatives)


def build_dataset_proposal_targets(
    model: AdaptISNet,
    dataset: Dataset,
    cfg: TrainConfig,
    *,
    threshold: float = 0.5,
    progress: bool = True,
) -> List[ProposalTargets]:
    model.eval()
    targets = []
    for index, sample in enumerate(tqdm(dataset, desc="proposal targets", leave=False, disable=not progress)):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index, 1]))
        targets.append(
            build_proposal_targets(model, sample, cfg.proposal_candidates_per_object, rng, threshold=threshold)
        )
    return targets


class ProposalTrainingSet(TorchDataset):
    def __init__(self, dataset: Dataset, targets: Sequence[ProposalTargets]) -> None:
        if len(dataset) != len(targets):
            raise ValueError("one proposal target map is required per sample")
        self.dataset = dataset
        self.targets = targets

    def __len__(self) -> int:
        return len(self.dataset)

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        labels = self.targets[index]
        return {
            "image": prepare_image(self.dataset[index].image),
            "target": torch.from_numpy(labels.target),
            "valid": torch.from_numpy(labels.valid),
        }


def _set_frozen(model: AdaptISNet, frozen: bool) -> None:
    for name, parameter in model.named_parameters():
        if not name.startswith(PROPOSAL_HEAD_PREFIX):
            parameter.requires_grad_(not frozen)


def train_proposal_branch(
    model: AdaptISNet,
    dataset: Dataset,
    cfg: TrainConfig,
    out_dir: Optional[Path] = None,
    *,
    targets: Optional[Sequence[ProposalTargets]] = None,
    threshold: float = 0.5,
    device: str = "cpu",
    progress: bool = True,
) -> TrainingResult:
    """Train only the proposal head with BCE on sampled pixels; every other weight stays bit-identical."""
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    model.to(device)
    if targets is None:
        targets = build_dataset_proposal_targets(model, dataset, cfg, threshold=threshold, progress=progress)
    frozen_before = parameter_digest(model, exclude=(PROPOSAL_HEAD_PREFIX,))
    loader = _make_loader(ProposalTrainingSet(dataset, targets), cfg, seed_offset=1)
    optimizer = torch.optim.Adam(
        model.proposal_head.parameters(), lr=cfg.proposal_lr, betas=(cfg.adam_beta1, cfg.adam_beta2)
    )

    records: List[EpochRecord] = []
    step_losses: List[float] = []
    checkpoint: Optional[Path] = None
    _set_frozen(model, True)
    try:
        for epoch in range(1, cfg.proposal_epochs + 1):
            model.eval()
            model.proposal_head.train()
            started = time.perf_counter()
            losses: List[float] = []
            batches = tqdm(loader, desc=f"proposals {epoch}/{cfg.proposal_epochs}", leave=False, disable=not progress)
            for batch_index, batch in enumerate(batches):
                with torch.no_grad():
                    features = model.backbone_forward(batch["image"].to(device))
                scores = model.proposal_head_forward(features)
                loss = bce_loss(scores, batch["target"].to(device), batch["valid"].to(device), epsilon=cfg.loss.epsilon)
                _check_finite("proposals", epoch, batch_index, loss.detach(), {"bce": float(loss.detach())})
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                losses.append(float(loss.detach()))
                step_losses.append(losses[-1])
                batches.set_postfix(loss=f"{losses[-1]:.4f}")
            record = _epoch_record("proposals", epoch, losses, cfg.proposal_lr, {"bce": losses}, started)
            records.append(record)
            LOGGER.info("proposal epoch %d: median loss %.4f", epoch, record.median_loss)
            if out_dir is not None:
                append_record(Path(out_dir) / METRICS_LOG_NAME, record)
    finally:
        _set_frozen(model, False)
        model.eval()

    if parameter_digest(model, exclude=(PROPOSAL_HEAD_PREFIX,)) != frozen_before:
        raise RuntimeError("frozen parameters changed during proposal-branch training")
    if out_dir is not None:
        checkpoint = save_checkpoint(
            model,
            Path(out_dir) / "checkpoints" / f"epoch_{cfg.proposal_epochs}.pt",
            epoch=cfg.proposal_epochs,
            stage="proposals",
            extra={"frozen_digest": frozen_before},
        )
    return TrainingResult(checkpoint=checkpoint, records=records, step_losses=step_losses)


def describe_result(result: TrainingResult) -> Dict[str, Any]:
    return {
        "checkpoint": str(result.checkpoint) if result.checkpoint else None,
        "epochs": len(result.records),
        "final_median_loss": result.records[-1].median_loss if result.records else None,
    }


__all__ = [
    "NonFiniteLossError",
    "ProposalTargets",
    "ProposalTrainingSet",
    "ToyTrainingSet",
    "TrainingResult",
    "augment_sample",
    "build_dataset_proposal_targets",
    "build_proposal_targets",
    "describe_result",
    "positive_count",
    "predict_confidences",
    "rank_candidates",
    "sample_point_proposals",
    "seed_everything",
    "train_adaptis",
    "train_proposal_branch",
]
