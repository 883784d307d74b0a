"""Backbone, controller, AdaIN instance head and the two auxiliary per-pixel heads."""

from __future__ import annotations

import dataclasses
import logging
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from adaptis.config.settings import ModelConfig
from adaptis.model.layers import ConvBlock, ShapeError, adain, relative_coordconv, sample_embedding
from adaptis.structures import PointProposal

LOGGER = logging.getLogger(__name__)

PointLike = Union[PointProposal, Tuple[float, float]]


@dataclasses.dataclass
class FeatureMap:
    """Backbone output ``Q`` (``N×C×h×w``) and its stride relative to the input."""

    values: torch.Tensor
    stride: int = 1


@dataclasses.dataclass
class ConfidenceMap:
    """Per-pixel object confidence for one point proposal."""

    values: torch.Tensor
    source_point: PointProposal


class UNetBackbone(nn.Module):
    """Plain U-Net with ``depth`` pooling stages and output stride 1."""

    def __init__(self, in_channels: int = 3, width: int = 32, depth: int = 3) -> None:
        super().__init__()
        self.depth = depth
        channels = [width * 2**level for level in range(depth + 1)]
        self.encoders = nn.ModuleList()
        previous = in_channels
        for level in range(depth + 1):
            self.encoders.append(ConvBlock(previous, channels[level]))
            previous = channels[level]
        self.decoders = nn.ModuleList(
            ConvBlock(channels[level + 1] + channels[level], channels[level]) for level in reversed(range(depth))
        )
        self.out_channels = width
        self.stride = 1

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        divisor = 2**self.depth
        if images.dim() != 4 or images.shape[2] % divisor or images.shape[3] % divisor:
            raise ShapeError(
                f"backbone expects N×C×H×W input with H, W divisible by {divisor}, got {tuple(images.shape)}"
            )
        skips: List[torch.Tensor] = []
        x = images
        for level, encoder in enumerate(self.encoders):
            if level > 0:
                x = F.max_pool2d(x, 2)
            x = encoder(x)
            skips.append(x)
        x = skips.pop()
        for decoder in self.decoders:
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = decoder(torch.cat([skip, x], dim=1))
        return x


class Controller(nn.Sequential):
    """Fully connected layers mapping ``Q(x, y)`` to the characteristic vector.

    The last linear layer is the concatenation of one affine projection per AdaIN
    layer, so the output is laid out as ``[scale_1, bias_1, scale_2, bias_2, ...]``.
    """

    def __init__(self, in_features: int, hidden: Sequence[int], out_features: int) -> None:
        layers: List[nn.Module] = []
        previous = in_features
        for width in hidden:
            layers += [nn.Linear(previous, width), nn.ReLU(inplace=True)]
            previous = width
        layers.append(nn.Linear(previous, out_features))
        super().__init__(*layers)
        self.in_features = in_features
        self.out_features = out_features

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:  # type: ignore[override]
        if embedding.shape[-1] != self.in_features:
            raise ShapeError(f"controller expects {self.in_features}-dim embeddings, got {embedding.shape[-1]}")
        return super().forward(embedding)


class InstanceHead(nn.Module):
    """Lightweight instance selection network: conv → AdaIN → ReLU blocks, then 1×1 conv."""

    def __init__(self, in_channels: int, widths: Sequence[int], eps: float = 1e-5) -> None:
        super().__init__()
        self.widths = tuple(widths)
        self.eps = eps
        self.convs = nn.ModuleList()
        previous = in_channels
        for width in self.widths:
            self.convs.append(nn.Conv2d(previous, width, 3, padding=1))
            previous = width
        self.out_conv = nn.Conv2d(previous, 1, 1)
        self.in_channels = in_channels

    @property
    def adain_demand(self) -> int:
        return 2 * sum(self.widths)

    def forward(
        self,
        features: torch.Tensor,
        characteristic: torch.Tensor,
        output_size: Optional[Tuple[int, int]] = None,
    ) -> torch.Tensor:
        if features.shape[1] != self.in_channels:
            raise ShapeError(f"instance head expects {self.in_channels} channels, got {features.shape[1]}")
        if characteristic.shape != (features.shape[0], self.adain_demand):
            raise ShapeError(
                f"characteristic vector must be N×{self.adain_demand}, got {tuple(characteristic.shape)}"
            )
        x = features
        offset = 0
        for conv, width in zip(self.convs, self.widths):
            scale = characteristic[:, offset : offset + width]
            bias = characteristic[:, offset + width : offset + 2 * width]
            offset += 2 * width
            x = F.relu(adain(conv(x), scale, bias, self.eps))
        logits = self.out_conv(x)
        if output_size is not None and tuple(logits.shape[-2:]) != tuple(output_size):
            logits = F.interpolate(logits, size=output_size, mode="bilinear", align_corners=False)
        return torch.sigmoid(logits[:, 0])


class SegmentationHead(nn.Sequential):
    """3×3 conv-BN-ReLU followed by a 1×1 classifier; returns logits."""

    def __init__(self, in_channels: int, width: int, out_channels: int) -> None:
        super().__init__(
            nn.Conv2d(in_channels, width, 3, padding=1, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, out_channels, 1),
        )


def _points_tensor(points: Sequence[PointLike], device: torch.device, dtype: torch.dtype) -> torch.Tensor:
    coords = [(p.x, p.y) if isinstance(p, PointProposal) else (float(p[0]), float(p[1])) for p in points]
    return torch.tensor(coords, dtype=dtype, device=device).reshape(-1, 2)


def prepare_image(image: np.ndarray) -> torch.Tensor:
    """Convert an ``H×W×3`` uint8 image into a ``3×H×W`` float tensor in ``[0, 1]``."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an H×W×3 image, got {image.shape}")
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float() / 255.0


class AdaptISNet(nn.Module):
    """Point-conditioned instance segmentation network with semantic and proposal branches."""

    def __init__(self, config: Optional[ModelConfig] = None) -> None:
        super().__init__()
        self.config = (config or ModelConfig()).validate()
        cfg = self.config
        self.backbone = UNetBackbone(cfg.in_channels, cfg.backbone_width, cfg.backbone_depth)
        feature_channels = self.backbone.out_channels
        self.instance_head = InstanceHead(
            feature_channels + (2 if cfg.use_coordconv else 0), cfg.head_widths, cfg.adain_eps
        )
        self.controller = Controller(feature_channels, cfg.controller_widths, self.instance_head.adain_demand)
        self.semantic_head: Optional[SegmentationHead] = None
        if cfg.semantic_enabled:
            self.semantic_head = SegmentationHead(feature_channels, cfg.segmentation_head_width, cfg.num_classes)
        self.proposal_head = SegmentationHead(feature_channels, cfg.segmentation_head_width, 1)

    @property
    def stride(self) -> int:
        return self.backbone.stride

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device

    def joint_parameters(self) -> List[nn.Parameter]:
        """Parameters optimised in the first stage (everything except the proposal branch)."""
        proposal = {id(p) for p in self.proposal_head.parameters()}
        return [p for p in self.parameters() if id(p) not in proposal]

    def backbone_forward(self, images: torch.Tensor) -> FeatureMap:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        return FeatureMap(values=self.backbone(images), stride=self.stride)

    def sample_embedding(self, features: FeatureMap, points: torch.Tensor) -> torch.Tensor:
        return sample_embedding(features.values, points, features.stride)

    def controller_forward(self, embedding: torch.Tensor) -> torch.Tensor:
        return self.controller(embedding)

    def coordinate_maps(self, points: torch.Tensor, feature_size: Tuple[int, int]) -> torch.Tensor:
        return relative_coordconv(points, self.config.coordconv_radius, feature_size, self.stride)

    def instance_head_forward(
        self,
        features: FeatureMap,
        coordmaps: Optional[torch.Tensor],
        characteristic: torch.Tensor,
    ) -> torch.Tensor:
        """Confidence maps ``N×H×W`` for features, coordinate maps and characteristic vectors."""
        values = features.values
        if self.config.use_coordconv:
            if coordmaps is None:
                raise ShapeError("coordinate maps are required when use_coordconv is enabled")
            values = torch.cat([values, coordmaps.to(values.dtype)], dim=1)
        height, width = features.values.shape[-2:]
        return self.instance_head(values, characteristic, (height * features.stride, width * features.stride))

    def forward_points(self, features: FeatureMap, points: torch.Tensor) -> torch.Tensor:
        """Run controller and instance head for one point per feature map (``N×2`` points)."""
        embedding = self.sample_embedding(features, points)
        characteristic = self.controller_forward(embedding)
        coordmaps = None
        if self.config.use_coordconv:
            coordmaps = self.coordinate_maps(points, tuple(features.values.shape[-2:]))
        return self.instance_head_forward(features, coordmaps, characteristic)

    def forward(self, images: torch.Tensor, points: torch.Tensor) -> Dict[str, torch.Tensor]:
        """Training forward: ``N×3×H×W`` images and ``N×K×2`` points.

        Returns ``instances`` (``N×K×H×W`` confidences) and, when the semantic branch is
        enabled, ``semantic`` logits (``N×L×H×W``).
        """
        features = self.backbone_forward(images)
        n, k = points.shape[:2]
        repeated = FeatureMap(features.values.repeat_interleave(k, dim=0), features.stride)
        confidences = self.forward_points(repeated, points.reshape(n * k, 2).to(features.values.dtype))
        outputs = {"instances": confidences.reshape(n, k, *confidences.shape[-2:])}
        if self.semantic_head is not None:
            outputs["semantic"] = self.semantic_head(features.values)
        return outputs

    def adaptis_forward(
        self,
        image: torch.Tensor,
        points: Sequence[PointLike],
        chunk_size: int = 64,
    ) -> List[ConfidenceMap]:
        """Confidence maps for several points on one image; the backbone runs once."""
        if not points:
            raise ValueError("adaptis_forward needs at least one point")
        features = self.backbone_forward(image)
        if features.values.shape[0] != 1:
            raise ShapeError("adaptis_forward takes a single image")
        height, width = (s * features.stride for s in features.values.shape[-2:])
        proposals = [p if isinstance(p, PointProposal) else PointProposal(float(p[0]), float(p[1])) for p in points]
        for proposal in proposals:
            proposal.check_bounds(height, width)
        coords = _points_tensor(proposals, features.values.device, features.values.dtype)
        maps: List[torch.Tensor] = []
        for start in range(0, len(proposals), chunk_size):
            chunk = coords[start : start + chunk_size]
            expanded = FeatureMap(features.values.expand(chunk.shape[0], -1, -1, -1), features.stride)
            maps.extend(self.forward_points(expanded, chunk).unbind(0))
        return [ConfidenceMap(values=m, source_point=p) for m, p in zip(maps, proposals)]

    def semantic_head_forward(self, features: FeatureMap) -> torch.Tensor:
        """Per-class softmax probabilities ``N×L×H×W``."""
        if self.semantic_head is None:
            raise RuntimeError("this model was built without a semantic branch (num_classes == 1)")
        return torch.softmax(self.semantic_head(features.values), dim=1)

    def proposal_head_forward(self, features: FeatureMap) -> torch.Tensor:
        """Proposal quality scores ``N×H×W`` in ``[0, 1]``."""
        return torch.sigmoid(self.proposal_head(features.values)[:, 0])


class Predictor:
    """Caches backbone features for one image and evaluates point proposals on demand."""

    def __init__(self, model: AdaptISNet, image: np.ndarray, chunk_size: int = 64) -> None:
        self.model = model.eval()
        self.chunk_size = chunk_size
        self.height, self.width = int(image.shape[0]), int(image.shape[1])
        with torch.no_grad():
            tensor = prepare_image(image).to(model.device)
            self.features = model.backbone_forward(tensor)
        self._semantic: Optional[np.ndarray] = None
        self._proposals: Optional[np.ndarray] = None

    def __call__(self, points: Sequence[PointLike]) -> np.ndarray:
        """Return ``K×H×W`` float confidences for ``points``."""
        if not points:
            return np.zeros((0, self.height, self.width), dtype=np.float32)
        coords = _points_tensor(points, self.features.values.device, self.features.values.dtype)
        for x, y in coords.tolist():
            PointProposal(x, y).check_bounds(self.height, self.width)
        chunks: List[np.ndarray] = []
        with torch.no_grad():
            for start in range(0, coords.shape[0], self.chunk_size):
                chunk = coords[start : start + self.chunk_size]
                expanded = FeatureMap(self.features.values.expand(chunk.shape[0], -1, -1, -1), self.features.stride)
                chunks.append(self.model.forward_points(expanded, chunk).cpu().numpy())
        return np.concatenate(chunks, axis=0)

    def semantic_probabilities(self) -> np.ndarray:
        """``L×H×W`` softmax output of the semantic branch."""
        if self._semantic is None:
            with torch.no_grad():
                self._semantic = self.model.semantic_head_forward(self.features)[0].cpu().numpy()
        return self._semantic

    def proposal_scores(self) -> np.ndarray:
        """``H×W`` proposal-quality map."""
        if self._proposals is None:
            with torch.no_grad():
                self._proposals = self.model.proposal_head_forward(self.features)[0].cpu().numpy()
        return self._proposals


__all__ = [
    "AdaptISNet",
    "ConfidenceMap",
    "Controller",
    "FeatureMap",
    "InstanceHead",
    "Predictor",
    "SegmentationHead",
    "UNetBackbone",
    "prepare_image",
]
