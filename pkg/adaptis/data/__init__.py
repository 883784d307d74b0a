"""Toy benchmark generation and storage."""

from .storage import DatasetLoadError, read_dataset, write_dataset
from .toygen import Dataset, ToySample, apply_corruptions, generate_dataset, generate_sample

__all__ = [
    "Dataset",
    "DatasetLoadError",
    "ToySample",
    "apply_corruptions",
    "generate_dataset",
    "generate_sample",
    "read_dataset",
    "write_dataset",
]
