"""Training, inference, evaluation and reporting for the toy AdaptIS pipeline."""

from .ablation import AblationResult, run_ablation
from .evaluation import (
    evaluate_predictions,
    ground_truth_prediction,
    mask_consistency,
    predict_dataset,
    read_prediction,
    write_prediction,
)
from .history import EpochRecord, parse_metrics_log, summarize_history
from .inference import (
    AggregationState,
    InstanceResult,
    LearnedStrategy,
    RandomStrategy,
    find_local_maxima,
    greedy_aggregate,
    panoptic_segment,
    proposal_strategy,
    random_strategy,
    segment_instances,
)
from .losses import bce_loss, build_loss, focal_loss, normalized_focal_loss
from .metrics import PQAccumulator, average_precision, mask_iou, mean_iou, panoptic_quality
from .training import (
    NonFiniteLossError,
    build_proposal_targets,
    sample_point_proposals,
    seed_everything,
    train_adaptis,
    train_proposal_branch,
)

__all__ = [
    "AblationResult",
    "AggregationState",
    "EpochRecord",
    "InstanceResult",
    "LearnedStrategy",
    "NonFiniteLossError",
    "PQAccumulator",
    "RandomStrategy",
    "average_precision",
    "bce_loss",
    "build_loss",
    "build_proposal_targets",
    "evaluate_predictions",
    "find_local_maxima",
    "focal_loss",
    "greedy_aggregate",
    "ground_truth_prediction",
    "mask_consistency",
    "mask_iou",
    "mean_iou",
    "normalized_focal_loss",
    "panoptic_quality",
    "panoptic_segment",
    "parse_metrics_log",
    "predict_dataset",
    "proposal_strategy",
    "random_strategy",
    "read_prediction",
    "run_ablation",
    "sample_point_proposals",
    "seed_everything",
    "segment_instances",
    "summarize_history",
    "train_adaptis",
    "train_proposal_branch",
    "write_prediction",
]
