"""Lossless on-disk format for toy datasets."""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path
from typing import Any, Dict, List

import numpy as np
from PIL import Image

from adaptis.config.settings import GenConfig, config_from_dict
from adaptis.data.toygen import Dataset, ToySample

LOGGER = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


class DatasetLoadError(RuntimeError):
    """Raised when a dataset directory is missing files or holds inconsistent data."""


def _sample_paths(root: Path, sample_id: str) -> Dict[str, Path]:
    return {
        "image": root / f"{sample_id}_img.png",
        "instances": root / f"{sample_id}_inst.png",
        "semantic": root / f"{sample_id}_sem.png",
    }


def write_dataset(dataset: Dataset, path: Path) -> Path:
    """Write PNG files per sample plus ``manifest.json``; returns the manifest path."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    records: List[Dict[str, Any]] = []
    for sample in dataset:
        if len(sample.instances) > np.iinfo(np.uint16).max:
            raise ValueError(f"Sample {sample.sample_id} has too many instances for a 16-bit id map")
        paths = _sample_paths(root, sample.sample_id)
        Image.fromarray(np.ascontiguousarray(sample.image, dtype=np.uint8)).save(paths["image"])
        Image.fromarray(sample.instance_map().astype(np.uint16)).save(paths["instances"])
        Image.fromarray(sample.semantic_map.astype(np.uint8)).save(paths["semantic"])
        records.append(
            {
                "sample_id": sample.sample_id,
                "instance_count": len(sample.instances),
                "instance_classes": list(sample.instance_classes),
            }
        )

    manifest = {
        "format_version": FORMAT_VERSION,
        "split": dataset.split,
        "count": len(records),
        "gen_config": dataclasses.asdict(dataset.gen_config),
        "samples": records,
    }
    manifest_path = root / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    LOGGER.info("Wrote %d %s samples to %s", len(records), dataset.split, root)
    return manifest_path


def _read_png(path: Path, sample_id: str) -> np.ndarray:
    if not path.is_file():
        raise DatasetLoadError(f"Sample {sample_id}: missing file {path.name}")
    try:
        with Image.open(path) as handle:
            return np.array(handle)
    except OSError as exc:
        raise DatasetLoadError(f"Sample {sample_id}: cannot decode {path.name}: {exc}") from exc


def _read_sample(root: Path, record: Dict[str, Any]) -> ToySample:
    sample_id = str(record["sample_id"])
    paths = _sample_paths(root, sample_id)
    image = _read_png(paths["image"], sample_id)
    id_map = _read_png(paths["instances"], sample_id).astype(np.int64)
    semantic_map = _read_png(paths["semantic"], sample_id).astype(np.uint8)

    if image.ndim != 3 or image.shape[2] != 3:
        raise DatasetLoadError(f"Sample {sample_id}: image must be RGB, got shape {image.shape}")
    if id_map.shape != image.shape[:2] or semantic_map.shape != image.shape[:2]:
        raise DatasetLoadError(f"Sample {sample_id}: image, instance and semantic sizes differ")

    count = int(record["instance_count"])
    if id_map.max(initial=0) > count:
        raise DatasetLoadError(f"Sample {sample_id}: instance id {id_map.max()} exceeds count {count}")
    instances = [id_map == index + 1 for index in range(count)]
    for index, mask in enumerate(instances):
        if not mask.any():
            raise DatasetLoadError(f"Sample {sample_id}: instance {index + 1} has no pixels")
    classes = [int(c) for c in record.get("instance_classes", [])]
    if len(classes) != count:
        raise DatasetLoadError(f"Sample {sample_id}: {len(classes)} classes listed for {count} instances")
    return ToySample(
        image=image.astype(np.uint8),
        instances=instances,
        semantic_map=semantic_map,
        sample_id=sample_id,
        instance_classes=classes,
    )


def read_dataset(path: Path) -> Dataset:
    """Load a dataset written by ``write_dataset``."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetLoadError(f"No {MANIFEST_NAME} in {root}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetLoadError(f"Corrupt manifest {manifest_path}: {exc}") from exc

    records = manifest.get("samples", [])
    if manifest.get("count") != len(records):
        raise DatasetLoadError(
            f"Manifest count {manifest.get('count')} does not match {len(records)} listed samples"
        )
    gen_config = config_from_dict(GenConfig, manifest.get("gen_config", {}))
    samples = [_read_sample(root, record) for record in records]
    return Dataset(samples=samples, gen_config=gen_config, split=manifest.get("split", "train"))


__all__ = ["DatasetLoadError", "MANIFEST_NAME", "read_dataset", "write_dataset"]
