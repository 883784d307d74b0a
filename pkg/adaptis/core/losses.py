"""Pixel-wise mask losses: normalized focal loss, focal loss and binary cross-entropy.

All losses take probabilities (post-sigmoid) and binary targets shaped ``H×W`` or
``N×H×W``. Each mask is reduced on its own and the result is the mean over masks.
An optional ``valid`` mask of the same shape excludes pixels from the loss.
"""

from __future__ import annotations

import functools
from typing import Callable, Optional, Tuple

import torch

from adaptis.config.settings import LossConfig

LossFn = Callable[[torch.Tensor, torch.Tensor, Optional[torch.Tensor]], torch.Tensor]

DEFAULT_EPSILON = 1e-6


def _prepare(
    pred: torch.Tensor, target: torch.Tensor, valid: Optional[torch.Tensor]
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ in shape")
    if valid is not None and valid.shape != pred.shape:
        raise ValueError(f"valid mask {tuple(valid.shape)} does not match prediction {tuple(pred.shape)}")
    if pred.dim() < 2:
        raise ValueError("losses expect H×W or N×H×W inputs")
    if pred.dim() == 2:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
        valid = valid.unsqueeze(0) if valid is not None else None
    pred = pred.flatten(1)
    target = target.flatten(1).to(pred.dtype)
    weight = torch.ones_like(pred) if valid is None else valid.flatten(1).to(pred.dtype)
    return pred, target, weight


def _true_class_probability(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    # p_t: the predicted probability of the ground-truth label of each pixel
    return torch.where(target > 0.5, pred, 1.0 - pred)


def _mean_over_masks(per_mask: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    has_pixels = weight.sum(dim=1) > 0
    if not bool(has_pixels.any()):
        return per_mask.sum() * 0.0
    return per_mask[has_pixels].mean()


def bce_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    valid: Optional[torch.Tensor] = None,
    *,
    epsilon: float = DEFAULT_EPSILON,
) -> torch.Tensor:
    """Mean of ``−log p_t`` over (valid) pixels."""
    pred, target, weight = _prepare(pred, target, valid)
    nll = -torch.log(_true_class_probability(pred, target).clamp_min(epsilon))
    per_mask = (nll * weight).sum(dim=1) / weight.sum(dim=1).clamp_min(1.0)
    return _mean_over_masks(per_mask, weight)


def focal_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    valid: Optional[torch.Tensor] = None,
    *,
    gamma: float = 2.0,
    epsilon: float = DEFAULT_EPSILON,
) -> torch.Tensor:
    """Mean of ``−(1 − p_t)^γ log p_t`` over (valid) pixels."""
    pred, target, weight = _prepare(pred, target, valid)
    p_t = _true_class_probability(pred, target)
    nll = -torch.log(p_t.clamp_min(epsilon))
    focal = torch.pow(1.0 - p_t, gamma) * nll
    per_mask = (focal * weight).sum(dim=1) / weight.sum(dim=1).clamp_min(1.0)
    return _mean_over_masks(per_mask, weight)


def normalized_focal_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    valid: Optional[torch.Tensor] = None,
    *,
    gamma: float = 2.0,
    epsilon: float = DEFAULT_EPSILON,
    normalizer_detached: bool = True,
) -> torch.Tensor:
    """Focal terms divided by their total weight ``P = Σ (1 − p_t)^γ``, summed per mask.

    ``P`` is floored at ``epsilon`` so a perfect prediction yields 0 rather than NaN.
    With ``normalizer_detached`` the normalizer carries no gradient.
    """
    pred, target, weight = _prepare(pred, target, valid)
    p_t = _true_class_probability(pred, target)
    nll = -torch.log(p_t.clamp_min(epsilon))
    focal_weight = torch.pow(1.0 - p_t, gamma) * weight
    normalizer = focal_weight.sum(dim=1).clamp_min(epsilon)
    if normalizer_detached:
        normalizer = normalizer.detach()
    per_mask = (focal_weight * nll).sum(dim=1) / normalizer
    return _mean_over_masks(per_mask, weight)


def normalized_weights(pred: torch.Tensor, target: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Per-pixel NFL weights ``(1 − p_t)^γ / P`` for one mask; they sum to one."""
    p_t = _true_class_probability(pred, target.to(pred.dtype))
    weights = torch.pow(1.0 - p_t, gamma)
    return weights / weights.sum().clamp_min(DEFAULT_EPSILON)


def build_loss(config: LossConfig) -> LossFn:
    """Return the instance loss selected by ``config.kind``."""
    config.validate()
    if config.kind == "nfl":
        return functools.partial(
            normalized_focal_loss,
            gamma=config.gamma,
            epsilon=config.epsilon,
            normalizer_detached=config.normalizer_detached,
        )
    if config.kind == "fl":
        return functools.partial(focal_loss, gamma=config.gamma, epsilon=config.epsilon)
    return functools.partial(bce_loss, epsilon=config.epsilon)


__all__ = [
    "bce_loss",
    "build_loss",
    "focal_loss",
    "normalized_focal_loss",
    "normalized_weights",
]
