"""Desk-scale convolutional trunk producing the backbone map F_BB."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, ValidationError


@dataclass(frozen=True)
class BackboneConfig:
    stage_widths: tuple[int, ...] = (32, 64, 128)
    stage_strides: tuple[int, ...] = (2, 2, 2)
    image_size: tuple[int, int] = (64, 32)
    seed: int = 0

    def __post_init__(self):
        if len(self.stage_widths) != len(self.stage_strides) or not self.stage_widths:
            raise ConfigError("stage_widths and stage_strides must be non-empty and equally long")
        if any(w <= 0 for w in self.stage_widths) or any(s <= 0 for s in self.stage_strides):
            raise ConfigError("stage widths and strides must be positive")
        h, w = self.image_size
        ds = self.downsampling
        if h % ds or w % ds:
            raise ConfigError(f"image size {h}x{w} not divisible by total downsampling {ds}")
        fh, fw = self.map_size
        if fh < 2 or fh % 2 or fw < 2:
            raise ConfigError(f"feature map {fh}x{fw} must have even height >= 2 and width >= 2")

    @property
    def downsampling(self) -> int:
        return math.prod(self.stage_strides)

    @property
    def channels(self) -> int:
        return self.stage_widths[-1]

    @property
    def map_size(self) -> tuple[int, int]:
        h, w = self.image_size
        return h // self.downsampling, w // self.downsampling


def _stage(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Plain conv stack; each stage is two 3x3 conv-BN-ReLU with the first strided."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        g = torch.Generator().manual_seed(config.seed)
        stages, cin = [], 3
        for width, stride in zip(config.stage_widths, config.stage_strides):
            stages.append(_stage(cin, width, stride))
            cin = width
        self.stages = nn.Sequential(*stages)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                with torch.no_grad():
                    m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=g)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.stages(images)


def _check_images(images: torch.Tensor, config: BackboneConfig):
    if images.dim() != 4 or images.shape[0] < 1 or images.shape[1] != 3:
        raise ValidationError(f"expected (batch, 3, H, W) images, got {tuple(images.shape)}")
    h, w = images.shape[-2:]
    ds = config.downsampling
    if h % ds or w % ds:
        raise ConfigError(f"image size {h}x{w} not divisible by total downsampling {ds}")
    if not torch.isfinite(images).all():
        raise ValidationError("images contain non-finite values")


def extract_feature_map(images: torch.Tensor, backbone: Backbone) -> torch.Tensor:
    """Run the trunk; output is (batch, C, H/ds, W/ds)."""
    _check_images(images, backbone.config)
    return backbone(images)


def global_pool(fmap: torch.Tensor) -> torch.Tensor:
    if fmap.dim() != 4:
        raise ValidationError(f"expected a rank-4 feature map, got shape {tuple(fmap.shape)}")
    return fmap.mean(dim=(2, 3))
