"""Running a trained model over a dataset, storing predictions and scoring them."""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from tqdm import tqdm

from adaptis.config.settings import BACKGROUND_CLASS, CAPSULE_CLASS, GenConfig, InferenceConfig
from adaptis.core.inference import InstanceResult, run_panoptic, segment_instances
from adaptis.core.metrics import (
    GroundTruthInstance,
    InstancePrediction,
    MeanIoUAccumulator,
    PQAccumulator,
    average_precision,
    mask_iou,
)
from adaptis.data.toygen import Dataset, ToySample
from adaptis.model.network import AdaptISNet, Predictor
from adaptis.structures import PanopticMap, PointProposal

LOGGER = logging.getLogger(__name__)

METRICS_FORMAT_VERSION = 1
PREDICTION_FORMAT_VERSION = 1


@dataclasses.dataclass
class StoredPrediction:
    """Prediction files of one image as written by ``write_prediction``."""

    sample_id: str
    instance_map: np.ndarray
    panoptic: PanopticMap
    segments: List[Dict[str, Any]]
    confidences: Optional[np.ndarray] = None

    def instance_predictions(self) -> List[InstancePrediction]:
        return [
            InstancePrediction(mask=self.instance_map == s["instance_id"], score=float(s["score"]), image_id=self.sample_id)
            for s in self.segments
            if s["area"] > 0
        ]


def _panoptic_for(result: InstanceResult) -> PanopticMap:
    if result.panoptic is not None:
        return result.panoptic
    class_map = np.where(result.instance_map > 0, CAPSULE_CLASS, BACKGROUND_CLASS).astype(np.int32)
    return PanopticMap(class_map=class_map, instance_map=result.instance_map)


def to_stored(sample_id: str, result: InstanceResult, keep_confidences: bool = False) -> StoredPrediction:
    return StoredPrediction(
        sample_id=sample_id,
        instance_map=result.instance_map,
        panoptic=_panoptic_for(result),
        segments=[dataclasses.asdict(record) for record in result.records],
        confidences=result.confidences() if keep_confidences else None,
    )


def ground_truth_prediction(sample: ToySample) -> StoredPrediction:
    """Ground truth in prediction form; every instance scores 1."""
    instance_map = sample.instance_map().astype(np.int32)
    segments = [
        {
            "instance_id": index + 1,
            "class_id": int(class_id),
            "score": 1.0,
            "area": int(mask.sum()),
            "source_id": index + 1,
        }
        for index, (mask, class_id) in enumerate(zip(sample.instances, sample.instance_classes))
    ]
    return StoredPrediction(
        sample_id=sample.sample_id,
        instance_map=instance_map,
        panoptic=sample.panoptic_map(),
        segments=segments,
    )


def _paths(root: Path, sample_id: str) -> Dict[str, Path]:
    return {
        "instances": root / f"{sample_id}_instances.png",
        "panoptic_class": root / f"{sample_id}_panoptic_class.png",
        "panoptic_ids": root / f"{sample_id}_panoptic_ids.png",
        "segments": root / f"{sample_id}_segments.json",
        "confidences": root / f"{sample_id}_confidences.npz",
    }


def write_prediction(out_dir: Path, prediction: StoredPrediction) -> None:
    """Write id maps as 16-bit PNGs, the class map as 8-bit PNG and a segment table."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    paths = _paths(root, prediction.sample_id)
    Image.fromarray(prediction.instance_map.astype(np.uint16)).save(paths["instances"])
    Image.fromarray(prediction.panoptic.class_map.astype(np.uint8)).save(paths["panoptic_class"])
    Image.fromarray(prediction.panoptic.instance_map.astype(np.uint16)).save(paths["panoptic_ids"])
    paths["segments"].write_text(
        json.dumps(
            {"format_version": PREDICTION_FORMAT_VERSION, "sample_id": prediction.sample_id, "segments": prediction.segments},
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    if prediction.confidences is not None:
        np.savez_compressed(paths["confidences"], confidences=prediction.confidences.astype(np.float32))


def read_prediction(root: Path, sample_id: str) -> StoredPrediction:
    """Load the files written by ``write_prediction``."""
    paths = _paths(Path(root), sample_id)
    for key in ("instances", "panoptic_class", "panoptic_ids", "segments"):
        if not paths[key].is_file():
            raise FileNotFoundError(f"Prediction for {sample_id}: missing {paths[key].name}")
    with Image.open(paths["instances"]) as handle:
        instance_map = np.array(handle).astype(np.int32)
    with Image.open(paths["panoptic_class"]) as handle:
        class_map = np.array(handle).astype(np.int32)
    with Image.open(paths["panoptic_ids"]) as handle:
        panoptic_ids = np.array(handle).astype(np.int32)
    table = json.loads(paths["segments"].read_text(encoding="utf-8"))
    confidences = None
    if paths["confidences"].is_file():
        with np.load(paths["confidences"]) as archive:
            confidences = archive["confidences"]
    return StoredPrediction(
        sample_id=sample_id,
        instance_map=instance_map,
        panoptic=PanopticMap(class_map=class_map, instance_map=panoptic_ids),
        segments=list(table.get("segments", [])),
        confidences=confidences,
    )


def predict_sample(
    model: AdaptISNet,
    image: np.ndarray,
    config: InferenceConfig,
    gen_config: GenConfig,
    rng: np.random.Generator,
    *,
    strategy: Optional[str] = None,
) -> InstanceResult:
    """Class-agnostic instances, or the full panoptic pipeline when the model has a semantic branch."""
    predictor = Predictor(model, image, chunk_size=config.chunk_size)
    if model.config.semantic_enabled:
        return run_panoptic(
            predictor,
            config,
            thing_classes=gen_config.thing_classes,
            stuff_classes=gen_config.stuff_classes,
            rng=rng,
            strategy=strategy,
        )
    return segment_instances(predictor, config, rng, strategy=strategy)


def sample_inference_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index, 2]))


def predict_dataset(
    model: AdaptISNet,
    dataset: Dataset,
    config: InferenceConfig,
    *,
    strategy: Optional[str] = None,
    progress: bool = True,
) -> Iterator[Tuple[ToySample, StoredPrediction]]:
    """Yield ``(sample, prediction)`` pairs in dataset order."""
    model.eval()
    for index, sample in enumerate(tqdm(dataset, desc="inference", leave=False, disable=not progress)):
        result = predict_sample(
            model, sample.image, config, dataset.gen_config, sample_inference_rng(config.seed, index), strategy=strategy
        )
        yield sample, to_stored(sample.sample_id, result, keep_confidences=config.save_confidences)


def evaluate_predictions(
    pairs: Iterable[Tuple[ToySample, StoredPrediction]],
    gen_config: GenConfig,
    thresholds: Sequence[float] = (0.5, 0.6, 0.7, 0.8, 0.9),
) -> Dict[str, Any]:
    """Score predictions against ground truth; returns the versioned metrics record."""
    predictions: List[InstancePrediction] = []
    ground_truth: List[GroundTruthInstance] = []
    pq = PQAccumulator(gen_config.thing_classes, gen_config.stuff_classes)
    miou = MeanIoUAccumulator()
    images = 0
    for sample, prediction in pairs:
        images += 1
        predictions.extend(prediction.instance_predictions())
        ground_truth.extend(GroundTruthInstance(mask=mask, image_id=sample.sample_id) for mask in sample.instances)
        pq.update(prediction.panoptic, sample.panoptic_map())
        miou.update(prediction.panoptic.class_map, sample.semantic_map.astype(np.int32))

    ap = average_precision(predictions, ground_truth, thresholds)
    pq_result = pq.result()
    return {
        "format_version": METRICS_FORMAT_VERSION,
        "images": images,
        "instances": ap.to_dict(),
        "panoptic": pq_result.to_dict(),
        "miou": miou.result(),
        "per_class_iou": {str(c): v for c, v in miou.per_class().items()},
        "classes": {"things": list(gen_config.thing_classes), "stuff": list(gen_config.stuff_classes)},
    }


def mask_consistency(
    model: AdaptISNet,
    dataset: Dataset,
    n_objects: int = 100,
    *,
    threshold: float = 0.5,
    seed: int = 0,
    chunk_size: int = 64,
) -> Dict[str, float]:
    """Mean IoU between masks produced from two random interior points of the same object."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    ious: List[float] = []
    model.eval()
    for sample in dataset:
        if len(ious) >= n_objects:
            break
        if not sample.instances:
            continue
        predictor = Predictor(model, sample.image, chunk_size=chunk_size)
        for mask in sample.instances:
            if len(ious) >= n_objects:
                break
            pixels = np.argwhere(mask)
            if len(pixels) >= 2:
                first, second = pixels[rng.choice(len(pixels), size=2, replace=False)]
            else:
                first = second = pixels[0]
            points = [PointProposal(float(p[1]), float(p[0])) for p in (first, second)]
            maps = predictor(points)
            ious.append(mask_iou(maps[0] > threshold, maps[1] > threshold))
    if len(ious) < n_objects:
        LOGGER.warning("Only %d objects available for the consistency check (wanted %d)", len(ious), n_objects)
    return {"objects": len(ious), "mean_pairwise_iou": float(np.mean(ious)) if ious else 0.0}


def write_metrics(path: Path, record: Dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


__all__ = [
    "METRICS_FORMAT_VERSION",
    "StoredPrediction",
    "evaluate_predictions",
    "ground_truth_prediction",
    "mask_consistency",
    "predict_dataset",
    "predict_sample",
    "read_prediction",
    "to_stored",
    "write_metrics",
    "write_prediction",
]
