"""Saving and restoring network weights together with the config that shaped them."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import torch
from torch import nn

from adaptis.config.settings import ModelConfig, config_from_dict
from adaptis.model.network import AdaptISNet

LOGGER = logging.getLogger(__name__)


def parameter_digest(module: nn.Module, exclude: Sequence[str] = ()) -> str:
    """SHA-256 over every tensor of ``module.state_dict()`` in key order.

    Keys starting with any prefix in ``exclude`` are skipped.
    """
    digest = hashlib.sha256()
    for key, tensor in sorted(module.state_dict().items()):
        if any(key.startswith(prefix) for prefix in exclude):
            continue
        digest.update(key.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(
    model: AdaptISNet,
    path: Path,
    *,
    epoch: int = 0,
    stage: str = "adaptis",
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write weights, the ``ModelConfig`` echo, epoch, stage and parameter digest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "model_config": dataclasses.asdict(model.config),
        "state_dict": {key: value.detach().cpu() for key, value in model.state_dict().items()},
        "epoch": int(epoch),
        "stage": stage,
        "digest": parameter_digest(model),
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)
    LOGGER.info("Saved %s checkpoint (epoch %d) to %s", stage, epoch, path)
    return path


def load_checkpoint(path: Path, device: str = "cpu") -> Tuple[AdaptISNet, Dict[str, Any]]:
    """Rebuild the network from a checkpoint; returns the model in eval mode and the metadata."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    config: ModelConfig = config_from_dict(ModelConfig, payload["model_config"])
    model = AdaptISNet(config)
    model.load_state_dict(payload["state_dict"])
    if parameter_digest(model) != payload.get("digest"):
        LOGGER.warning("Parameter digest of %s does not match the stored value", path)
    metadata = {key: payload.get(key) for key in ("epoch", "stage", "digest", "extra")}
    return model.to(device).eval(), metadata


__all__ = ["load_checkpoint", "parameter_digest", "save_checkpoint"]
