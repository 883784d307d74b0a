"""Network components and checkpoint helpers."""

from .checkpoint import load_checkpoint, parameter_digest, save_checkpoint
from .layers import ShapeError, adain, relative_coordconv, sample_embedding
from .network import AdaptISNet, ConfidenceMap, FeatureMap, Predictor, prepare_image

__all__ = [
    "AdaptISNet",
    "ConfidenceMap",
    "FeatureMap",
    "Predictor",
    "ShapeError",
    "adain",
    "load_checkpoint",
    "parameter_digest",
    "prepare_image",
    "relative_coordconv",
    "sample_embedding",
    "save_checkpoint",
]
