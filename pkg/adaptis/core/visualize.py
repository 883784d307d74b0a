"""Static PNG renderings: confidence heatmaps, instance and panoptic maps, proposal scores."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from matplotlib import colormaps
from PIL import Image

from adaptis.config.settings import GenConfig, InferenceConfig
from adaptis.core.evaluation import predict_sample
from adaptis.core.inference import find_local_maxima
from adaptis.model.network import AdaptISNet, Predictor
from adaptis.structures import PanopticMap, PointProposal

LOGGER = logging.getLogger(__name__)

HEATMAP_CMAP = "viridis"
INSTANCE_CMAP = "tab20"
CLASS_CMAP = "tab10"
POINT_COLOR = (255, 64, 64)


def _to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def colorize_confidence(confidence: np.ndarray) -> np.ndarray:
    """Map ``[0, 1]`` confidences to RGB."""
    return _to_uint8(colormaps[HEATMAP_CMAP](np.clip(confidence, 0.0, 1.0))[..., :3])


def colorize_instances(instance_map: np.ndarray) -> np.ndarray:
    """One color per instance id; id 0 stays black."""
    palette = colormaps[INSTANCE_CMAP]
    colors = palette(instance_map % palette.N)[..., :3]
    colors[instance_map == 0] = 0.0
    return _to_uint8(colors)


def colorize_panoptic(panoptic: PanopticMap) -> np.ndarray:
    """Class color, brightened per instance so touching things stay distinguishable."""
    palette = colormaps[CLASS_CMAP]
    base = palette(panoptic.class_map % palette.N)[..., :3]
    shade = np.where(panoptic.instance_map > 0, 0.55 + 0.45 * ((panoptic.instance_map * 7) % 10) / 9.0, 1.0)
    return _to_uint8(base * shade[..., None])


def blend(image: np.ndarray, overlay: np.ndarray, alpha: float = 0.6) -> np.ndarray:
    mixed = (1.0 - alpha) * image.astype(np.float64) + alpha * overlay.astype(np.float64)
    return np.clip(np.rint(mixed), 0, 255).astype(np.uint8)


def mark_points(rgb: np.ndarray, points: Sequence[PointProposal], color=POINT_COLOR, radius: int = 1) -> np.ndarray:
    marked = rgb.copy()
    height, width = marked.shape[:2]
    for point in points:
        row, col = point.pixel
        marked[max(row - radius, 0) : min(row + radius + 1, height), col] = color
        marked[row, max(col - radius, 0) : min(col + radius + 1, width)] = color
    return marked


def save_png(path: Path, rgb: np.ndarray) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb).save(path)
    return path


def write_visualizations(
    model: AdaptISNet,
    image: np.ndarray,
    out_dir: Path,
    *,
    points: Optional[Sequence[PointProposal]] = None,
    config: Optional[InferenceConfig] = None,
    gen_config: Optional[GenConfig] = None,
    prefix: str = "image",
    rng: Optional[np.random.Generator] = None,
) -> List[Path]:
    """Render every view for one image; without ``points`` they come from the inference strategy."""
    config = (config or InferenceConfig()).validate()
    gen_config = gen_config or GenConfig(panoptic_mode=model.config.semantic_enabled)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    out_dir = Path(out_dir)
    height, width = image.shape[:2]
    written: List[Path] = []

    result = predict_sample(model, image, config, gen_config, rng)
    if points is None:
        events = [event for event in result.state.events if event.committed]
        points = [event.point for event in events]
        LOGGER.info("No points given; using %d committed proposals", len(points))
    else:
        points = [p.check_bounds(height, width) for p in points]

    predictor = Predictor(model, image, chunk_size=config.chunk_size)
    if points:
        confidences = predictor(points)
        for index, (point, confidence) in enumerate(zip(points, confidences)):
            heatmap = mark_points(blend(image, colorize_confidence(confidence)), [point])
            written.append(save_png(out_dir / f"{prefix}_heatmap_{index:03d}.png", heatmap))

    written.append(save_png(out_dir / f"{prefix}_instances.png", blend(image, colorize_instances(result.instance_map))))
    if result.panoptic is not None:
        written.append(save_png(out_dir / f"{prefix}_panoptic.png", colorize_panoptic(result.panoptic)))

    scores = predictor.proposal_scores()
    maxima = [point for point, _ in find_local_maxima(scores)[: config.max_iters]]
    written.append(save_png(out_dir / f"{prefix}_proposals.png", mark_points(colorize_confidence(scores), maxima)))
    return written


__all__ = [
    "blend",
    "colorize_confidence",
    "colorize_instances",
    "colorize_panoptic",
    "mark_points",
    "save_png",
    "write_visualizations",
]
