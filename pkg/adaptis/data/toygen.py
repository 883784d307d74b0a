"""Synthetic toy benchmark: overlapping elongated objects with blur and noise."""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from adaptis.config.settings import (
    BACKGROUND_CLASS,
    CAPSULE_CLASS,
    ELLIPSE_CLASS,
    TEXTURE_CLASS,
    GenConfig,
)
from adaptis.structures import PanopticMap

LOGGER = logging.getLogger(__name__)

SPLITS = ("train", "test")

BACKGROUND_COLOR = (24, 24, 28)
FILL_COLORS = {CAPSULE_CLASS: (45, 70, 215), ELLIPSE_CLASS: (60, 175, 80)}
BORDER_COLORS = {CAPSULE_CLASS: (215, 40, 40), ELLIPSE_CLASS: (225, 205, 45)}
TEXTURE_COLORS = ((112, 108, 96), (72, 70, 64))


@dataclasses.dataclass(eq=False)
class ToySample:
    """One rendered image with its visible instance masks and semantic map."""

    image: np.ndarray
    instances: List[np.ndarray]
    semantic_map: np.ndarray
    sample_id: str
    instance_classes: List[int] = dataclasses.field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.instance_classes:
            self.instance_classes = [CAPSULE_CLASS] * len(self.instances)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ToySample):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.instance_classes == other.instance_classes
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.semantic_map, other.semantic_map)
            and len(self.instances) == len(other.instances)
            and all(np.array_equal(a, b) for a, b in zip(self.instances, other.instances))
        )

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])

    def instance_map(self) -> np.ndarray:
        """Return a uint16 map with id ``k + 1`` on the visible pixels of instance ``k``."""
        id_map = np.zeros(self.semantic_map.shape, dtype=np.uint16)
        for index, mask in enumerate(self.instances):
            id_map[mask] = index + 1
        return id_map

    def panoptic_map(self) -> PanopticMap:
        return PanopticMap(
            class_map=self.semantic_map.astype(np.int32),
            instance_map=self.instance_map().astype(np.int32),
        )


@dataclasses.dataclass(eq=False)
class Dataset:
    """Ordered toy samples of one split together with the config that produced them."""

    samples: List[ToySample]
    gen_config: GenConfig
    split: str = "train"

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        ids = [sample.sample_id for sample in self.samples]
        if len(ids) != len(set(ids)):
            raise ValueError("sample ids must be unique within a dataset")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[ToySample]:
        return iter(self.samples)

    def __getitem__(self, index: int) -> ToySample:
        return self.samples[index]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.split == other.split
            and dataclasses.asdict(self.gen_config) == dataclasses.asdict(other.gen_config)
            and len(self.samples) == len(other.samples)
            and all(a == b for a, b in zip(self.samples, other.samples))
        )


@dataclasses.dataclass
class _Shape:
    class_id: int
    interior: np.ndarray
    boundary: np.ndarray


def sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    """Independent generator for one sample, derived from ``(seed, split, index)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), SPLITS.index(split), int(index)]))


def _capsule(
    rows: np.ndarray, cols: np.ndarray, center: Tuple[float, float], angle: float, length: float, width: float, border: float
) -> Tuple[np.ndarray, np.ndarray]:
    cy, cx = center
    dx, dy = np.cos(angle), np.sin(angle)
    half_segment = max(length - width, 0.0) / 2.0
    px, py = cols - cx, rows - cy
    along = np.clip(px * dx + py * dy, -half_segment, half_segment)
    distance = np.hypot(px - along * dx, py - along * dy)
    radius = width / 2.0
    interior = distance <= radius
    return interior, interior & (distance > radius - border)


def _ellipse(
    rows: np.ndarray, cols: np.ndarray, center: Tuple[float, float], angle: float, length: float, width: float, border: float
) -> Tuple[np.ndarray, np.ndarray]:
    cy, cx = center
    px, py = cols - cx, rows - cy
    u = px * np.cos(angle) + py * np.sin(angle)
    v = -px * np.sin(angle) + py * np.cos(angle)
    semi_major, semi_minor = length / 2.0, width / 2.0
    radius = np.sqrt((u / semi_major) ** 2 + (v / semi_minor) ** 2)
    interior = radius <= 1.0
    return interior, interior & (radius > 1.0 - border / semi_minor)


def _sample_shape(rng: np.random.Generator, cfg: GenConfig, rows: np.ndarray, cols: np.ndarray) -> _Shape:
    height, width = cfg.image_size
    class_id = CAPSULE_CLASS
    if cfg.panoptic_mode and rng.random() < cfg.ellipse_fraction:
        class_id = ELLIPSE_CLASS
    center = (rng.uniform(0, height), rng.uniform(0, width))
    angle = rng.uniform(0.0, np.pi)
    length = rng.uniform(*cfg.object_length_range)
    object_width = min(rng.uniform(*cfg.object_width_range), length)
    draw = _ellipse if class_id == ELLIPSE_CLASS else _capsule
    interior, boundary = draw(rows, cols, center, angle, length, object_width, cfg.border_width)
    return _Shape(class_id=class_id, interior=interior, boundary=boundary)


def _draw_stuff_region(
    rng: np.random.Generator,
    cfg: GenConfig,
    image: np.ndarray,
    semantic_map: np.ndarray,
    rows: np.ndarray,
    cols: np.ndarray,
) -> None:
    """Paint a striped half-plane that covers a random share of the image."""
    direction = rng.uniform(0.0, 2 * np.pi)
    fraction = rng.uniform(*cfg.stuff_fraction_range)
    projection = cols * np.cos(direction) + rows * np.sin(direction)
    region = projection <= np.quantile(projection, fraction)

    stripe_angle = rng.uniform(0.0, np.pi)
    period = rng.uniform(3.0, 7.0)
    stripes = np.floor((cols * np.cos(stripe_angle) + rows * np.sin(stripe_angle)) / period).astype(np.int64) % 2
    for parity, color in enumerate(TEXTURE_COLORS):
        image[region & (stripes == parity)] = color
    semantic_map[region] = TEXTURE_CLASS


def apply_corruptions(image: np.ndarray, rng: np.random.Generator, cfg: GenConfig) -> np.ndarray:
    """Gaussian blur then i.i.d. uniform pixel noise, clamped to ``[0, 255]``."""
    sigma = rng.uniform(*cfg.blur_sigma_range)
    amplitude = rng.uniform(*cfg.noise_amplitude_range)
    corrupted = image.astype(np.float64)
    if sigma > 0:
        corrupted = gaussian_filter(corrupted, sigma=(sigma, sigma, 0.0), mode="nearest")
    noise = rng.uniform(-amplitude, amplitude, size=corrupted.shape)
    return np.clip(np.rint(corrupted + noise), 0, 255).astype(np.uint8)


def generate_sample(rng: np.random.Generator, cfg: GenConfig, sample_id: str = "sample") -> ToySample:
    """Render one toy image; later objects occlude earlier ones."""
    height, width = cfg.image_size
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    image = np.empty((height, width, 3), dtype=np.float64)
    image[:] = BACKGROUND_COLOR
    semantic_map = np.full((height, width), BACKGROUND_CLASS, dtype=np.uint8)
    if cfg.panoptic_mode:
        _draw_stuff_region(rng, cfg, image, semantic_map, rows, cols)

    low, high = cfg.objects_per_image
    n_objects = int(rng.integers(low, high + 1))
    owner = np.zeros((height, width), dtype=np.int32)
    shapes: List[_Shape] = []
    for object_index in range(n_objects):
        accepted: Optional[np.ndarray] = None
        for _ in range(cfg.max_object_retries + 1):
            shape = _sample_shape(rng, cfg, rows, cols)
            if not shape.interior.any():
                continue
            candidate = np.where(shape.interior, len(shapes) + 1, owner)
            visible = np.bincount(candidate.ravel(), minlength=len(shapes) + 2)
            # Every previously drawn object must keep at least one visible pixel.
            if (visible[1 : len(shapes) + 1] > 0).all():
                accepted = candidate
                break
        if accepted is None:
            LOGGER.warning(
                "Dropping object %d of %s after %d retries (fully occludes an earlier object)",
                object_index,
                sample_id,
                cfg.max_object_retries,
            )
            continue
        owner = accepted
        shapes.append(shape)

    for shape in shapes:
        image[shape.interior] = FILL_COLORS[shape.class_id]
        image[shape.boundary] = BORDER_COLORS[shape.class_id]
        semantic_map[shape.interior] = shape.class_id

    corrupted = apply_corruptions(image.astype(np.uint8), rng, cfg)
    instances = [owner == index + 1 for index in range(len(shapes))]
    return ToySample(
        image=corrupted,
        instances=instances,
        semantic_map=semantic_map,
        sample_id=sample_id,
        instance_classes=[shape.class_id for shape in shapes],
    )


def _generate_indexed(args: Tuple[GenConfig, str, int]) -> ToySample:
    cfg, split, index = args
    return generate_sample(sample_rng(cfg.seed, split, index), cfg, sample_id=f"{split}_{index:06d}")


def generate_dataset(
    cfg: GenConfig,
    split: str = "train",
    n_samples: Optional[int] = None,
    *,
    workers: int = 0,
) -> Dataset:
    """Generate a split; samples are independent so ``workers > 1`` uses a process pool."""
    cfg.validate()
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    count = n_samples if n_samples is not None else (cfg.n_train if split == "train" else cfg.n_test)
    jobs: Sequence[Tuple[GenConfig, str, int]] = [(cfg, split, index) for index in range(count)]
    LOGGER.info("Generating %d %s samples (seed=%d, workers=%d)", count, split, cfg.seed, workers)
    if workers > 1 and count > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(_generate_indexed, jobs, chunksize=max(1, count // (4 * workers))))
    else:
        samples = [_generate_indexed(job) for job in jobs]
    return Dataset(samples=samples, gen_config=cfg, split=split)


__all__ = [
    "Dataset",
    "SPLITS",
    "ToySample",
    "apply_corruptions",
    "generate_dataset",
    "generate_sample",
    "sample_rng",
]
