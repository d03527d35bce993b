"""Feature extractors on top of F_BB.

Four features come out of one backbone map:

* ``g``      global feature, a Converter over the whole map
* ``parts``  horizontal stripes, each through its own Converter
             (two stripes by default: top and bottom)
* ``c``      Center-Focus feature, spatial softmax attention over a centered
             window followed by a linear projection to the shared width ``d``
"""
from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ValidationError


def _init_(tensor: torch.Tensor, fan_in: int, g: torch.Generator):
    bound = fan_in ** -0.5
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=g)


class Converter(nn.Module):
    """Grouped 1x1 convolution followed by global average pooling.

    Output channel ``c`` only reads input group ``c * groups // out_channels``.
    """

    def __init__(self, in_channels: int, out_channels: int, groups: int = 4, seed: int = 0):
        super().__init__()
        if groups <= 0 or in_channels % groups or out_channels % groups:
            raise ConfigError(
                f"channels ({in_channels} -> {out_channels}) must be divisible by groups={groups}")
        self.in_channels, self.out_channels, self.groups = in_channels, out_channels, groups
        self.conv = nn.Conv2d(in_channels, out_channels, 1, groups=groups, bias=True)
        g = torch.Generator().manual_seed(seed)
        _init_(self.conv.weight, in_channels // groups, g)
        _init_(self.conv.bias, in_channels // groups, g)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        if fmap.dim() != 4 or fmap.shape[1] != self.in_channels:
            raise ConfigError(
                f"converter expects {self.in_channels} channels, got shape {tuple(fmap.shape)}")
        return self.conv(fmap).mean(dim=(2, 3))


def split_parts(fmap: torch.Tensor, num_parts: int = 2) -> list[torch.Tensor]:
    """Cut the map into ``num_parts`` equal horizontal stripes, top to bottom."""
    h = fmap.shape[2]
    if num_parts <= 0 or h % num_parts:
        raise ConfigError(f"map height {h} not divisible into {num_parts} parts")
    return list(torch.split(fmap, h // num_parts, dim=2))


def center_window(height: int, width: int, size: int) -> tuple[slice, slice]:
    """Square ``size`` x ``size`` window, centered with floor offsets."""
    if size <= 0 or size > min(height, width):
        raise ConfigError(f"center size {size} exceeds map extent {height}x{width}")
    top, left = (height - size) // 2, (width - size) // 2
    return slice(top, top + size), slice(left, left + size)


class CenterFocus(nn.Module):
    """Spatial softmax attention restricted to the center window.

    With ``attention=False`` the window is averaged uniformly and the module
    has no parameters; this is the "CFM off" ablation.
    """

    def __init__(self, in_channels: int, size: int = 2, attention: bool = True, seed: int = 0):
        super().__init__()
        if size <= 0:
            raise ConfigError("center size must be positive")
        self.in_channels, self.size, self.attention = in_channels, size, attention
        if attention:
            self.score = nn.Conv2d(in_channels, 1, 1, bias=True)
            g = torch.Generator().manual_seed(seed)
            _init_(self.score.weight, in_channels, g)
            with torch.no_grad():
                self.score.bias.zero_()
        else:
            self.score = None

    def probabilities(self, fmap: torch.Tensor) -> torch.Tensor:
        """(batch, size, size) attention map over the window; each sums to 1."""
        rows, cols = center_window(fmap.shape[2], fmap.shape[3], self.size)
        crop = fmap[:, :, rows, cols]
        b = crop.shape[0]
        if self.score is None:
            return crop.new_full((b, self.size, self.size), 1.0 / self.size ** 2)
        logits = self.score(crop).reshape(b, -1)
        return F.softmax(logits, dim=1).reshape(b, self.size, self.size)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        if fmap.dim() != 4 or fmap.shape[1] != self.in_channels:
            raise ConfigError(
                f"center focus expects {self.in_channels} channels, got shape {tuple(fmap.shape)}")
        rows, cols = center_window(fmap.shape[2], fmap.shape[3], self.size)
        crop = fmap[:, :, rows, cols]
        p = self.probabilities(fmap)
        return (crop * p.unsqueeze(1)).sum(dim=(2, 3))


class PartFeatures(NamedTuple):
    g: torch.Tensor
    parts: list[torch.Tensor]
    c: torch.Tensor

    @property
    def t(self) -> torch.Tensor:
        return self.parts[0]

    @property
    def b(self) -> torch.Tensor:
        return self.parts[-1]


class FeatureHeads(nn.Module):
    def __init__(self, in_channels: int, dim: int | None = None, groups: int = 4,
                 center_size: int = 2, num_parts: int = 2, cfm: bool = True, seed: int = 0):
        super().__init__()
        dim = dim or in_channels // 4
        self.in_channels, self.dim, self.num_parts = in_channels, dim, num_parts
        self.cm_g = Converter(in_channels, dim, groups, seed=seed + 1)
        self.cm_parts = nn.ModuleList(
            Converter(in_channels, dim, groups, seed=seed + 2 + i) for i in range(num_parts))
        self.cfm = CenterFocus(in_channels, center_size, attention=cfm, seed=seed + 100)
        self.proj_c = nn.Linear(in_channels, dim)
        g = torch.Generator().manual_seed(seed + 101)
        _init_(self.proj_c.weight, in_channels, g)
        _init_(self.proj_c.bias, in_channels, g)

    def forward(self, fmap: torch.Tensor) -> PartFeatures:
        return extract_all(fmap, self)


def _named(name: str, fn, *args):
    try:
        return fn(*args)
    except (ConfigError, ValidationError) as e:
        raise type(e)(f"{name}: {e}") from e


def extract_all(fmap: torch.Tensor, heads: FeatureHeads) -> PartFeatures:
    f_g = _named("f_g", heads.cm_g, fmap)
    stripes = _named("parts", split_parts, fmap, heads.num_parts)
    parts = [_named(f"f_part{i}", cm, s) for i, (cm, s) in enumerate(zip(heads.cm_parts, stripes))]
    f_c = heads.proj_c(_named("f_c", heads.cfm, fmap))
    return PartFeatures(f_g, parts, f_c)
