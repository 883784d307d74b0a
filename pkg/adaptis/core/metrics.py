"""Mask IoU, average precision over IoU thresholds, panoptic quality and mean IoU."""

from __future__ import annotations

import dataclasses
import logging
from collections import defaultdict
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from adaptis.structures import PanopticMap

LOGGER = logging.getLogger(__name__)

AP_INTERPOLATION = "all-point"
AP_ACCUMULATION = "dataset"
PQ_MATCH_IOU = 0.5


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """``|a ∩ b| / |a ∪ b|``; two empty masks give 0 with a warning."""
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a, b = a.astype(bool), b.astype(bool)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        LOGGER.warning("mask_iou called with two empty masks; returning 0")
        return 0.0
    return float(np.logical_and(a, b).sum()) / union


@dataclasses.dataclass
class InstancePrediction:
    """One predicted instance mask, its ranking score and the image it belongs to."""

    mask: np.ndarray
    score: float
    image_id: str

    def __post_init__(self) -> None:
        if not self.mask.any():
            raise ValueError(f"prediction on {self.image_id} has an empty mask")
        if not np.isfinite(self.score):
            raise ValueError(f"prediction on {self.image_id} has a non-finite score")


@dataclasses.dataclass
class GroundTruthInstance:
    mask: np.ndarray
    image_id: str


@dataclasses.dataclass
class APResult:
    """AP per IoU threshold plus the protocol used to compute it."""

    values: Dict[float, float]
    num_predictions: int
    num_ground_truth: int
    interpolation: str = AP_INTERPOLATION
    accumulation: str = AP_ACCUMULATION

    def __getitem__(self, threshold: float) -> float:
        return self.values[threshold]

    def to_dict(self) -> Dict[str, object]:
        return {
            "ap": {f"{t:.2f}": v for t, v in sorted(self.values.items())},
            "num_predictions": self.num_predictions,
            "num_ground_truth": self.num_ground_truth,
            "interpolation": self.interpolation,
            "accumulation": self.accumulation,
        }


def _pairwise_iou(predictions: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> np.ndarray:
    if not predictions or not targets:
        return np.zeros((len(predictions), len(targets)))
    pred = np.stack([p.reshape(-1) for p in predictions]).astype(np.float64)
    gt = np.stack([t.reshape(-1) for t in targets]).astype(np.float64)
    intersection = pred @ gt.T
    union = pred.sum(axis=1)[:, None] + gt.sum(axis=1)[None, :] - intersection
    return np.divide(intersection, union, out=np.zeros_like(intersection), where=union > 0)


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the precision envelope (all-point interpolation)."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([1.0], precision, [0.0]))
    mpre = np.flip(np.maximum.accumulate(np.flip(mpre)))
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclasses.dataclass
class IoUTable:
    """Per-image IoU matrices between predictions and ground truth, shared across AP thresholds."""

    gt_by_image: Dict[str, List[int]]
    rows: Dict[int, int]
    ious: Dict[str, np.ndarray]

    @classmethod
    def build(
        cls, predictions: Sequence[InstancePrediction], ground_truth: Sequence[GroundTruthInstance]
    ) -> "IoUTable":
        gt_by_image: Dict[str, List[int]] = defaultdict(list)
        for index, gt in enumerate(ground_truth):
            gt_by_image[gt.image_id].append(index)
        pred_by_image: Dict[str, List[int]] = defaultdict(list)
        for index, prediction in enumerate(predictions):
            if prediction.image_id in gt_by_image:
                pred_by_image[prediction.image_id].append(index)

        rows: Dict[int, int] = {}
        ious: Dict[str, np.ndarray] = {}
        for image_id, pred_indices in pred_by_image.items():
            rows.update({pred_index: row for row, pred_index in enumerate(pred_indices)})
            ious[image_id] = _pairwise_iou(
                [predictions[i].mask for i in pred_indices],
                [ground_truth[j].mask for j in gt_by_image[image_id]],
            )
        return cls(gt_by_image=dict(gt_by_image), rows=rows, ious=ious)


def match_predictions(
    predictions: Sequence[InstancePrediction],
    ground_truth: Sequence[GroundTruthInstance],
    threshold: float,
    table: Optional[IoUTable] = None,
) -> Tuple[np.ndarray, List[Optional[int]]]:
    """Greedy score-ordered matching; returns the score order and the matched GT index per prediction."""
    order = sorted(range(len(predictions)), key=lambda i: -predictions[i].score)
    if table is None:
        table = IoUTable.build(predictions, ground_truth)

    matched_gt = set()
    matches: List[Optional[int]] = [None] * len(predictions)
    for pred_index in order:
        image_id = predictions[pred_index].image_id
        if image_id not in table.ious:
            continue
        row = table.ious[image_id][table.rows[pred_index]]
        best_iou, best_gt = -1.0, None
        for column, gt_index in enumerate(table.gt_by_image[image_id]):
            if gt_index not in matched_gt and row[column] > best_iou:
                best_iou, best_gt = row[column], gt_index
        if best_gt is not None and best_iou >= threshold:
            matched_gt.add(best_gt)
            matches[pred_index] = best_gt
    return np.asarray(order, dtype=np.int64), matches


def average_precision(
    predictions: Sequence[InstancePrediction],
    ground_truth: Sequence[GroundTruthInstance],
    thresholds: Iterable[float] = (0.5, 0.6, 0.7, 0.8, 0.9),
) -> APResult:
    """AP at each IoU threshold with precision/recall accumulated over the whole dataset."""
    if not ground_truth:
        raise ValueError("average precision is undefined without ground-truth instances")
    values: Dict[float, float] = {}
    table = IoUTable.build(predictions, ground_truth)
    for threshold in thresholds:
        if not predictions:
            values[float(threshold)] = 0.0
            continue
        order, matches = match_predictions(predictions, ground_truth, threshold, table)
        hits = np.array([matches[i] is not None for i in order], dtype=np.float64)
        tp = np.cumsum(hits)
        fp = np.cumsum(1.0 - hits)
        recall = tp / len(ground_truth)
        precision = tp / (tp + fp)
        values[float(threshold)] = interpolated_ap(recall, precision)
    return APResult(values=values, num_predictions=len(predictions), num_ground_truth=len(ground_truth))


@dataclasses.dataclass
class ClassStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    @property
    def counted(self) -> bool:
        return self.tp + self.fp + self.fn > 0

    @property
    def pq(self) -> float:
        denominator = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.iou_sum / denominator if denominator > 0 else 0.0

    @property
    def sq(self) -> float:
        return self.iou_sum / self.tp if self.tp else 0.0

    @property
    def rq(self) -> float:
        denominator = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.tp / denominator if denominator > 0 else 0.0


@dataclasses.dataclass
class PQResult:
    """Panoptic quality overall, over stuff and over things, with the per-class aggregates."""

    pq: float
    pq_stuff: float
    pq_things: float
    per_class: Dict[int, ClassStats]

    def to_dict(self) -> Dict[str, object]:
        return {
            "pq": self.pq,
            "pq_stuff": self.pq_stuff,
            "pq_things": self.pq_things,
            "per_class": {
                str(class_id): {**dataclasses.asdict(stats), "pq": stats.pq, "sq": stats.sq, "rq": stats.rq}
                for class_id, stats in sorted(self.per_class.items())
            },
        }


class PQAccumulator:
    """Accumulates per-class TP/FP/FN and matched IoU over many images."""

    def __init__(self, thing_classes: Iterable[int], stuff_classes: Iterable[int]) -> None:
        self.thing_classes = tuple(int(c) for c in thing_classes)
        self.stuff_classes = tuple(int(c) for c in stuff_classes)
        self.stats: Dict[int, ClassStats] = {c: ClassStats() for c in self.thing_classes + self.stuff_classes}

    def _check_classes(self, panoptic: PanopticMap, role: str) -> None:
        unknown = set(np.unique(panoptic.class_map).tolist()) - set(self.stats)
        if unknown:
            raise ValueError(f"{role} panoptic map uses unknown class ids {sorted(unknown)}")

    def update(self, prediction: PanopticMap, target: PanopticMap) -> None:
        if prediction.shape != target.shape:
            raise ValueError(f"panoptic maps differ in shape: {prediction.shape} vs {target.shape}")
        self._check_classes(prediction, "predicted")
        self._check_classes(target, "ground-truth")
        pred_segments = prediction.segments(self.stuff_classes)
        gt_segments = target.segments(self.stuff_classes)
        things = set(self.thing_classes)
        # thing pixels left without an instance id are unclaimed, not a predicted segment
        pred_segments = {key: m for key, m in pred_segments.items() if not (key[0] in things and key[1] == 0)}

        matched_pred = set()
        matched_gt = set()
        for gt_key, gt_mask in gt_segments.items():
            for pred_key, pred_mask in pred_segments.items():
                if pred_key[0] != gt_key[0] or pred_key in matched_pred:
                    continue
                iou = mask_iou(pred_mask, gt_mask)
                if iou > PQ_MATCH_IOU:
                    stats = self.stats[gt_key[0]]
                    stats.tp += 1
                    stats.iou_sum += iou
                    matched_pred.add(pred_key)
                    matched_gt.add(gt_key)
                    break
        for pred_key in pred_segments:
            if pred_key not in matched_pred:
                self.stats[pred_key[0]].fp += 1
        for gt_key in gt_segments:
            if gt_key not in matched_gt:
                self.stats[gt_key[0]].fn += 1

    def result(self) -> PQResult:
        def _mean(classes: Sequence[int]) -> float:
            counted = [self.stats[c].pq for c in classes if self.stats[c].counted]
            return float(np.mean(counted)) if counted else 0.0

        return PQResult(
            pq=_mean(self.thing_classes + self.stuff_classes),
            pq_stuff=_mean(self.stuff_classes),
            pq_things=_mean(self.thing_classes),
            per_class={c: dataclasses.replace(s) for c, s in self.stats.items()},
        )


def panoptic_quality(
    prediction: PanopticMap,
    target: PanopticMap,
    thing_classes: Iterable[int],
    stuff_classes: Iterable[int],
) -> PQResult:
    """Single-image panoptic quality."""
    accumulator = PQAccumulator(thing_classes, stuff_classes)
    accumulator.update(prediction, target)
    return accumulator.result()


def mean_iou(prediction: np.ndarray, target: np.ndarray) -> float:
    """Per-class IoU averaged over the classes present in ``target``."""
    if prediction.shape != target.shape:
        raise ValueError(f"semantic maps differ in shape: {prediction.shape} vs {target.shape}")
    classes = np.unique(target)
    ious = [mask_iou(prediction == c, target == c) for c in classes]
    return float(np.mean(ious)) if ious else 0.0


class MeanIoUAccumulator:
    """Dataset-level mIoU from summed per-class intersections and unions."""

    def __init__(self) -> None:
        self.intersection: Dict[int, int] = defaultdict(int)
        self.union: Dict[int, int] = defaultdict(int)
        self.present: set = set()

    def update(self, prediction: np.ndarray, target: np.ndarray) -> None:
        if prediction.shape != target.shape:
            raise ValueError(f"semantic maps differ in shape: {prediction.shape} vs {target.shape}")
        for class_id in np.union1d(np.unique(prediction), np.unique(target)).tolist():
            pred_mask, gt_mask = prediction == class_id, target == class_id
            self.intersection[class_id] += int(np.logical_and(pred_mask, gt_mask).sum())
            self.union[class_id] += int(np.logical_or(pred_mask, gt_mask).sum())
        self.present.update(np.unique(target).tolist())

    def per_class(self) -> Mapping[int, float]:
        return {c: self.intersection[c] / self.union[c] for c in sorted(self.present) if self.union[c]}

    def result(self) -> float:
        values = list(self.per_class().values())
        return float(np.mean(values)) if values else 0.0


__all__ = [
    "APResult",
    "ClassStats",
    "GroundTruthInstance",
    "InstancePrediction",
    "IoUTable",
    "MeanIoUAccumulator",
    "PQAccumulator",
    "PQResult",
    "average_precision",
    "interpolated_ap",
    "mask_iou",
    "match_predictions",
    "mean_iou",
    "panoptic_quality",
]
