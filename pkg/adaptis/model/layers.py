"""Functional building blocks of the instance selection network."""

from __future__ import annotations

from typing import Tuple

import torch
from torch import nn


class ShapeError(ValueError):
    """Raised when tensor shapes or dimensions do not match the model contract."""


def adain(features: torch.Tensor, scale: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Adaptive instance normalization.

    Each channel of ``features`` (``N×C×H×W`` or ``C×H×W``) is normalised over its
    spatial dimensions and then transformed by the supplied per-sample ``scale`` and
    ``bias`` (``N×C`` or ``C``).
    """
    squeeze = features.dim() == 3
    if squeeze:
        features, scale, bias = features.unsqueeze(0), scale.unsqueeze(0), bias.unsqueeze(0)
    if features.dim() != 4:
        raise ShapeError(f"adain expects C×H×W or N×C×H×W features, got {tuple(features.shape)}")
    n, c = features.shape[:2]
    if scale.shape != (n, c) or bias.shape != (n, c):
        raise ShapeError(
            f"scale {tuple(scale.shape)} and bias {tuple(bias.shape)} must both be {(n, c)}"
        )
    mean = features.mean(dim=(2, 3), keepdim=True)
    var = features.var(dim=(2, 3), unbiased=False, keepdim=True)
    normalized = (features - mean) / torch.sqrt(var + eps)
    out = scale[:, :, None, None] * normalized + bias[:, :, None, None]
    return out.squeeze(0) if squeeze else out


def relative_coordconv(
    points: torch.Tensor,
    radius: float,
    size: Tuple[int, int],
    stride: int = 1,
) -> torch.Tensor:
    """Coordinate maps centred on each point.

    ``points`` is ``N×2`` (or a single ``2`` vector) of ``(x, y)`` image coordinates.
    Returns ``N×2×h×w`` where channel 0 holds ``clamp((c·stride − x)/R, −1, 1)`` and
    channel 1 the same for rows.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    single = points.dim() == 1
    points = points.reshape(-1, 2)
    height, width = size
    cols = torch.arange(width, dtype=points.dtype, device=points.device) * stride
    rows = torch.arange(height, dtype=points.dtype, device=points.device) * stride
    map_x = ((cols[None, :] - points[:, 0:1]) / radius).clamp(-1.0, 1.0)
    map_y = ((rows[None, :] - points[:, 1:2]) / radius).clamp(-1.0, 1.0)
    coords = torch.stack(
        [
            map_x[:, None, :].expand(-1, height, -1),
            map_y[:, :, None].expand(-1, -1, width),
        ],
        dim=1,
    )
    return coords[0] if single else coords


def sample_embedding(features: torch.Tensor, points: torch.Tensor, stride: int = 1) -> torch.Tensor:
    """Bilinearly interpolate one feature column per point.

    ``features`` is ``N×C×h×w`` and ``points`` is ``N×2`` in image coordinates; point ``n``
    is read from feature map ``n``. Feature node ``(i, j)`` sits at image position
    ``(j·stride, i·stride)``. Points outside the image raise ``ValueError``.
    """
    if features.dim() != 4 or points.dim() != 2 or points.shape != (features.shape[0], 2):
        raise ShapeError(
            f"sample_embedding expects N×C×h×w features and N×2 points, got "
            f"{tuple(features.shape)} and {tuple(points.shape)}"
        )
    _, _, height, width = features.shape
    x, y = points[:, 0], points[:, 1]
    if not bool(((x >= 0) & (x < width * stride) & (y >= 0) & (y < height * stride)).all()):
        raise ValueError(f"points must lie inside a {height * stride}x{width * stride} image")

    fx, fy = x / stride, y / stride
    x0 = fx.floor().long().clamp(max=width - 1)
    y0 = fy.floor().long().clamp(max=height - 1)
    x1 = (x0 + 1).clamp(max=width - 1)
    y1 = (y0 + 1).clamp(max=height - 1)
    wx = (fx - x0.to(fx.dtype)).clamp(0.0, 1.0).to(features.dtype)[:, None]
    wy = (fy - y0.to(fy.dtype)).clamp(0.0, 1.0).to(features.dtype)[:, None]

    batch = torch.arange(features.shape[0], device=features.device)
    top = features[batch, :, y0, x0] * (1 - wx) + features[batch, :, y0, x1] * wx
    bottom = features[batch, :, y1, x0] * (1 - wx) + features[batch, :, y1, x1] * wx
    return top * (1 - wy) + bottom * wy


class ConvBlock(nn.Sequential):
    """Two 3×3 convolutions, each followed by BatchNorm and ReLU."""

    def __init__(self, in_channels: int, out_channels: int) -> None:
        super().__init__(
            nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )


__all__ = ["ConvBlock", "ShapeError", "adain", "relative_coordconv", "sample_embedding"]
