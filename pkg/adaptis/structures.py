"""Small value types shared by the data, model and inference layers."""

from __future__ import annotations

import dataclasses
import math
from typing import Dict, Iterable, List, Tuple

import numpy as np


@dataclasses.dataclass(frozen=True)
class PointProposal:
    """An ``(x, y)`` query point in input-image pixel coordinates."""

    x: float
    y: float

    def check_bounds(self, height: int, width: int) -> "PointProposal":
        """Raise ``ValueError`` unless ``0 <= x < width`` and ``0 <= y < height``."""
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"Point {self} has non-finite coordinates")
        if not (0.0 <= self.x < width and 0.0 <= self.y < height):
            raise ValueError(f"Point ({self.x}, {self.y}) lies outside a {height}x{width} image")
        return self

    @property
    def pixel(self) -> Tuple[int, int]:
        """Return the ``(row, col)`` pixel that contains the point."""
        return int(math.floor(self.y)), int(math.floor(self.x))


@dataclasses.dataclass(eq=False)
class PanopticMap:
    """Per-pixel class label ``l`` and instance id ``z`` (``z = 0`` for stuff)."""

    class_map: np.ndarray
    instance_map: np.ndarray

    def __post_init__(self) -> None:
        if self.class_map.shape != self.instance_map.shape or self.class_map.ndim != 2:
            raise ValueError(
                f"class_map {self.class_map.shape} and instance_map {self.instance_map.shape} "
                "must be equal 2-D shapes"
            )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PanopticMap):
            return NotImplemented
        return bool(
            np.array_equal(self.class_map, other.class_map)
            and np.array_equal(self.instance_map, other.instance_map)
        )

    @property
    def shape(self) -> Tuple[int, int]:
        return self.class_map.shape  # type: ignore[return-value]

    def segments(self, stuff_classes: Iterable[int] = ()) -> Dict[Tuple[int, int], np.ndarray]:
        """Split the map into ``(class, id)`` segments; stuff classes form one segment each."""
        stuff = set(int(c) for c in stuff_classes)
        instance_ids = np.where(np.isin(self.class_map, list(stuff)), 0, self.instance_map)
        keys = np.stack([self.class_map.astype(np.int64), instance_ids.astype(np.int64)], axis=-1)
        result: Dict[Tuple[int, int], np.ndarray] = {}
        for class_id, instance_id in np.unique(keys.reshape(-1, 2), axis=0):
            result[(int(class_id), int(instance_id))] = (self.class_map == class_id) & (
                instance_ids == instance_id
            )
        return result

    def check_invariants(self, thing_classes: Iterable[int]) -> List[str]:
        """Return human-readable invariant violations (empty when the map is valid).

        Pixels with an instance id must carry a thing label and every id must map to
        a single label. Thing-labelled pixels with ``z = 0`` are the uncovered
        fallback region and are allowed.
        """
        things = set(int(c) for c in thing_classes)
        problems: List[str] = []
        if (self.instance_map < 0).any():
            problems.append("negative instance ids present")
        for instance_id in np.unique(self.instance_map):
            if instance_id == 0:
                continue
            labels = np.unique(self.class_map[self.instance_map == instance_id])
            if labels.size != 1:
                problems.append(f"instance {int(instance_id)} spans labels {labels.tolist()}")
            elif int(labels[0]) not in things:
                problems.append(f"instance {int(instance_id)} carries non-thing label {int(labels[0])}")
        return problems


__all__ = ["PanopticMap", "PointProposal"]
