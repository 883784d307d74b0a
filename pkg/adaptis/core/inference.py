"""Greedy aggregation of point-conditioned masks, proposal strategies and panoptic assembly."""

from __future__ import annotations

import dataclasses
import logging
from collections import deque
from typing import Callable, Deque, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from adaptis.config.settings import InferenceConfig
from adaptis.structures import PanopticMap, PointProposal

LOGGER = logging.getLogger(__name__)

UNKNOWN = 0
OVERLAP_LIMIT = 0.5

FOUR_NEIGHBOURS = ((-1, 0), (1, 0), (0, -1), (0, 1))

ScoredPoint = Tuple[PointProposal, float]


class ConfidenceSource(Protocol):
    """Anything that maps point proposals on one image to ``K×H×W`` confidences."""

    height: int
    width: int

    def __call__(self, points: Sequence[PointProposal]) -> np.ndarray: ...


@dataclasses.dataclass
class Proposal:
    """A point to segment from, optionally with its already evaluated confidence map."""

    point: PointProposal
    confidence: Optional[np.ndarray] = None


@dataclasses.dataclass
class AggregationEvent:
    iteration: int
    point: PointProposal
    committed: bool
    overlap: float
    mask_area: int
    unknown_before: int
    instance_id: Optional[int] = None


@dataclasses.dataclass
class AggregationState:
    """Label map ``S`` plus the retained confidence maps of committed instances.

    ``labels`` holds 0 for UNKNOWN, ``i >= 1`` for instance ids and ``-(c + 1)`` for
    pixels pre-marked as stuff class ``c``.
    """

    labels: np.ndarray
    threshold: float = 0.5
    max_iters: int = 100
    kept: List[Tuple[int, np.ndarray]] = dataclasses.field(default_factory=list)
    commit_masks: List[np.ndarray] = dataclasses.field(default_factory=list)
    events: List[AggregationEvent] = dataclasses.field(default_factory=list)
    iterations: int = 0
    resolved: bool = False

    @classmethod
    def empty(cls, height: int, width: int, threshold: float = 0.5, max_iters: int = 100) -> "AggregationState":
        return cls(labels=np.zeros((height, width), dtype=np.int32), threshold=threshold, max_iters=max_iters)

    @property
    def unknown(self) -> np.ndarray:
        return self.labels == UNKNOWN

    @property
    def segmented(self) -> np.ndarray:
        return self.labels != UNKNOWN

    @property
    def budget_remaining(self) -> int:
        return max(self.max_iters - self.iterations, 0)

    @property
    def num_instances(self) -> int:
        return len(self.kept)

    def is_unknown(self, point: PointProposal) -> bool:
        row, col = point.pixel
        return bool(self.labels[row, col] == UNKNOWN)

    def commit(self, confidence: np.ndarray, mask: np.ndarray) -> int:
        instance_id = len(self.kept) + 1
        self.kept.append((instance_id, confidence))
        self.commit_masks.append(mask)
        self.labels[mask & self.unknown] = instance_id
        return instance_id

    def resolve(self) -> None:
        """Give every pixel covered by a committed mask to the most confident instance."""
        if not self.kept or self.resolved:
            self.resolved = True
            return
        covered = np.logical_or.reduce(self.commit_masks)
        stack = np.stack([confidence for _, confidence in self.kept])
        # argmax keeps the first maximum, so ties go to the lowest id
        winner = stack.argmax(axis=0).astype(np.int32) + 1
        self.labels[covered] = winner[covered]
        self.resolved = True

    def instance_map(self) -> np.ndarray:
        return np.where(self.labels > 0, self.labels, 0).astype(np.int32)


def greedy_aggregate(
    predictor: Optional[ConfidenceSource],
    strategy: Callable[[AggregationState], Optional[Proposal]],
    threshold: float = 0.5,
    max_iters: int = 100,
    *,
    initial_labels: Optional[np.ndarray] = None,
    shape: Optional[Tuple[int, int]] = None,
) -> AggregationState:
    """Commit candidate masks whose overlap with the segmented area is below one half.

    The loop stops once no UNKNOWN pixel remains, the strategy is exhausted or
    ``max_iters`` proposals have been spent. Empty masks are discarded but still
    consume budget.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if initial_labels is not None:
        labels = initial_labels.astype(np.int32, copy=True)
    else:
        if shape is None:
            if predictor is None:
                raise ValueError("shape or initial_labels is required without a predictor")
            shape = (predictor.height, predictor.width)
        labels = np.zeros(shape, dtype=np.int32)
    if (labels > 0).any():
        raise ValueError("initial labels may only mark stuff (negative) or UNKNOWN pixels")
    state = AggregationState(labels=labels, threshold=threshold, max_iters=max_iters)

    while state.iterations < max_iters and state.unknown.any():
        proposal = strategy(state)
        if proposal is None:
            LOGGER.debug("Strategy exhausted after %d proposals", state.iterations)
            break
        if not state.is_unknown(proposal.point):
            raise ValueError(f"strategy proposed {proposal.point}, which is already segmented")
        confidence = proposal.confidence
        if confidence is None:
            if predictor is None:
                raise ValueError("proposal carries no confidence map and no predictor was given")
            confidence = predictor([proposal.point])[0]
        state.iterations += 1

        mask = confidence > threshold
        area = int(mask.sum())
        unknown_before = int(state.unknown.sum())
        if area == 0:
            state.events.append(AggregationEvent(state.iterations, proposal.point, False, 1.0, 0, unknown_before))
            continue
        overlap = float((mask & state.segmented).sum()) / area
        event = AggregationEvent(state.iterations, proposal.point, False, overlap, area, unknown_before)
        if overlap < OVERLAP_LIMIT:
            event.committed = True
            event.instance_id = state.commit(confidence, mask)
        state.events.append(event)

    state.resolve()
    return state


def _mean_confidence(confidence: np.ndarray, threshold: float) -> float:
    mask = confidence > threshold
    if not mask.any():
        return float("-inf")
    return float(confidence[mask].mean())


def random_strategy(
    state: AggregationState,
    predictor: ConfidenceSource,
    rng: np.random.Generator,
    n_candidates: int = 7,
) -> Optional[Proposal]:
    """Evaluate ``n_candidates`` random UNKNOWN points and keep the most confident mask.

    Candidates are drawn uniformly with replacement; the winner is the first
    candidate (in draw order) with the highest mean confidence inside its mask.
    """
    unknown = np.argwhere(state.unknown)
    if unknown.size == 0:
        return None
    picks = unknown[rng.integers(0, len(unknown), size=n_candidates)]
    points = [PointProposal(float(col), float(row)) for row, col in picks]
    confidences = predictor(points)
    scores = [_mean_confidence(confidence, state.threshold) for confidence in confidences]
    best = int(np.argmax(scores))
    return Proposal(point=points[best], confidence=confidences[best])


class RandomStrategy:
    """Callable wrapper over ``random_strategy`` bound to one image."""

    def __init__(self, predictor: ConfidenceSource, rng: np.random.Generator, n_candidates: int = 7) -> None:
        self.predictor = predictor
        self.rng = rng
        self.n_candidates = n_candidates

    def __call__(self, state: AggregationState) -> Optional[Proposal]:
        return random_strategy(state, self.predictor, self.rng, self.n_candidates)


def find_local_maxima(score_map: np.ndarray) -> List[ScoredPoint]:
    """Plateau-aware local maxima of a 2-D map using a breadth-first flood.

    A plateau (4-connected pixels of equal value) is a maximum when none of its
    pixels has a strictly greater neighbour. Each maximum is reported once, at the
    plateau's smallest ``(row, col)``, sorted by score descending then by position.
    """
    values = np.asarray(score_map)
    if values.ndim != 2:
        raise ValueError(f"score map must be 2-D, got shape {values.shape}")
    if not np.isfinite(values).all():
        raise ValueError("score map contains non-finite values")
    height, width = values.shape
    visited = np.zeros((height, width), dtype=bool)
    maxima: List[Tuple[float, int, int]] = []

    for seed_row in range(height):
        for seed_col in range(width):
            if visited[seed_row, seed_col]:
                continue
            level = values[seed_row, seed_col]
            is_maximum = True
            queue: Deque[Tuple[int, int]] = deque([(seed_row, seed_col)])
            visited[seed_row, seed_col] = True
            while queue:
                row, col = queue.popleft()
                for d_row, d_col in FOUR_NEIGHBOURS:
                    n_row, n_col = row + d_row, col + d_col
                    if not (0 <= n_row < height and 0 <= n_col < width):
                        continue
                    neighbour = values[n_row, n_col]
                    if neighbour > level:
                        is_maximum = False
                    elif neighbour == level and not visited[n_row, n_col]:
                        visited[n_row, n_col] = True
                        queue.append((n_row, n_col))
            if is_maximum:
                # raster scan order makes the seed the plateau's smallest (row, col)
                maxima.append((float(level), seed_row, seed_col))

    maxima.sort(key=lambda item: (-item[0], item[1], item[2]))
    return [(PointProposal(float(col), float(row)), score) for score, row, col in maxima]


def proposal_strategy(state: AggregationState, maxima_queue: Deque[ScoredPoint]) -> Optional[Proposal]:
    """Pop maxima until one lies on an UNKNOWN pixel; ``None`` when the queue runs dry."""
    while maxima_queue:
        point, _ = maxima_queue.popleft()
        if state.is_unknown(point):
            return Proposal(point=point)
    return None


class LearnedStrategy:
    """Serves local maxima of the proposal-score map in descending order."""

    def __init__(self, score_map: np.ndarray) -> None:
        self.queue: Deque[ScoredPoint] = deque(find_local_maxima(score_map))

    def __call__(self, state: AggregationState) -> Optional[Proposal]:
        return proposal_strategy(state, self.queue)


@dataclasses.dataclass
class InstanceRecord:
    instance_id: int
    class_id: int
    score: float
    area: int
    source_id: int = 0


@dataclasses.dataclass
class InstanceResult:
    """Final instance ids (dense ``1..N``), per-instance records and the optional panoptic map."""

    instance_map: np.ndarray
    records: List[InstanceRecord]
    state: AggregationState
    panoptic: Optional[PanopticMap] = None

    def masks(self) -> List[np.ndarray]:
        return [self.instance_map == record.instance_id for record in self.records]

    def confidences(self) -> np.ndarray:
        """Retained confidence maps, one per record."""
        height, width = self.instance_map.shape
        if not self.records:
            return np.zeros((0, height, width), dtype=np.float32)
        by_id = dict(self.state.kept)
        return np.stack([by_id[record.source_id] for record in self.records])


def _build_strategy(
    predictor: ConfidenceSource,
    config: InferenceConfig,
    rng: Optional[np.random.Generator],
    strategy: Optional[str],
    default: str = "random",
) -> Callable[[AggregationState], Optional[Proposal]]:
    # "auto" is random points for class-agnostic runs and the proposal branch for panoptic ones
    name = strategy or config.strategy
    if name == "auto":
        name = default
    if name == "random":
        return RandomStrategy(predictor, rng if rng is not None else np.random.default_rng(config.seed), config.random_candidates)
    if name == "learned":
        scores = getattr(predictor, "proposal_scores", None)
        if scores is None:
            raise ValueError("the learned strategy needs a predictor with proposal scores")
        return LearnedStrategy(scores())
    raise ValueError(f"unknown strategy {name!r}")


def _dense_instances(state: AggregationState) -> Tuple[np.ndarray, List[Tuple[int, int, float, int]]]:
    """Relabel surviving instances densely; returns the map and (new id, state id, score, area)."""
    resolved = state.instance_map()
    dense = np.zeros_like(resolved)
    survivors: List[Tuple[int, int, float, int]] = []
    for (state_id, confidence), commit_mask in zip(state.kept, state.commit_masks):
        region = resolved == state_id
        area = int(region.sum())
        if area == 0:
            LOGGER.warning("Instance %d lost all pixels to more confident instances; dropping it", state_id)
            continue
        new_id = len(survivors) + 1
        dense[region] = new_id
        survivors.append((new_id, state_id, float(confidence[commit_mask].mean()), area))
    return dense, survivors


def segment_instances(
    predictor: ConfidenceSource,
    config: Optional[InferenceConfig] = None,
    rng: Optional[np.random.Generator] = None,
    *,
    strategy: Optional[str] = None,
    class_id: int = 1,
) -> InstanceResult:
    """Class-agnostic instance segmentation of one image."""
    config = (config or InferenceConfig()).validate()
    state = greedy_aggregate(
        predictor,
        _build_strategy(predictor, config, rng, strategy),
        config.threshold,
        config.max_iters,
    )
    dense, survivors = _dense_instances(state)
    records = [
        InstanceRecord(instance_id=new_id, class_id=class_id, score=score, area=area, source_id=state_id)
        for new_id, state_id, score, area in survivors
    ]
    LOGGER.debug("Segmented %d instances in %d proposals", len(records), state.iterations)
    return InstanceResult(instance_map=dense, records=records, state=state)


def panoptic_from_state(
    state: AggregationState,
    probabilities: np.ndarray,
    thing_classes: Sequence[int],
) -> InstanceResult:
    """Label resolved instances with their dominant thing class and fill the rest semantically."""
    semantic = probabilities.argmax(axis=0).astype(np.int32)
    things = [int(c) for c in thing_classes]
    dense, survivors = _dense_instances(state)
    class_map = semantic.copy()
    records: List[InstanceRecord] = []
    for new_id, state_id, score, area in survivors:
        region = dense == new_id
        totals = probabilities[things][:, region].sum(axis=1)
        label = things[int(np.argmax(totals))]
        class_map[region] = label
        records.append(InstanceRecord(new_id, label, score, area, source_id=state_id))
    panoptic = PanopticMap(class_map=class_map, instance_map=dense)
    return InstanceResult(instance_map=dense, records=records, state=state, panoptic=panoptic)


def run_panoptic(
    predictor: ConfidenceSource,
    config: Optional[InferenceConfig] = None,
    *,
    thing_classes: Sequence[int],
    stuff_classes: Sequence[int],
    rng: Optional[np.random.Generator] = None,
    strategy: Optional[str] = None,
) -> InstanceResult:
    """Stuff pre-fill, greedy aggregation over the remaining pixels, then label assignment."""
    config = (config or InferenceConfig()).validate()
    semantic_probabilities = getattr(predictor, "semantic_probabilities", None)
    if semantic_probabilities is None:
        raise ValueError("panoptic segmentation needs a predictor with a semantic branch")
    probabilities = semantic_probabilities()
    semantic = probabilities.argmax(axis=0).astype(np.int32)
    stuff = np.isin(semantic, list(stuff_classes))
    initial = np.where(stuff, -(semantic + 1), UNKNOWN).astype(np.int32)
    state = greedy_aggregate(
        predictor,
        _build_strategy(predictor, config, rng, strategy, "learned"),
        config.threshold,
        config.max_iters,
        initial_labels=initial,
    )
    return panoptic_from_state(state, probabilities, thing_classes)


def panoptic_segment(
    predictor: ConfidenceSource,
    config: Optional[InferenceConfig] = None,
    *,
    thing_classes: Sequence[int],
    stuff_classes: Sequence[int],
    rng: Optional[np.random.Generator] = None,
    strategy: Optional[str] = None,
) -> PanopticMap:
    result = run_panoptic(
        predictor,
        config,
        thing_classes=thing_classes,
        stuff_classes=stuff_classes,
        rng=rng,
        strategy=strategy,
    )
    assert result.panoptic is not None
    return result.panoptic


__all__ = [
    "AggregationEvent",
    "AggregationState",
    "InstanceRecord",
    "InstanceResult",
    "LearnedStrategy",
    "Proposal",
    "RandomStrategy",
    "find_local_maxima",
    "greedy_aggregate",
    "panoptic_from_state",
    "panoptic_segment",
    "proposal_strategy",
    "random_strategy",
    "run_panoptic",
    "segment_instances",
]
