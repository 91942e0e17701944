"""Split-attention residual encoder producing a five-level feature pyramid.

The backbone follows the deep-stem convention (three 3x3 convs, first one
strided) followed by a strided max-pool, then four stages of split-attention
residual blocks whose widths double per stage.  Alongside the pyramid there
is a full-resolution stem skip: the input after two plain 3x3 conv + ReLU
layers, kept for precise localization of small lesions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import nn_core
from .attention import SplitAttentionBlock
from .errors import ConfigError
from .nn_core import Conv2d, GroupNorm2d


@dataclass
class EncoderConfig:
    stage_depths: tuple = (2, 2, 2, 2)
    base_width: int = 32
    cardinality: int = 1
    radix: int = 2
    input_channels: int = 3
    stem_skip_width: int = 16
    deep_stem: bool = True

    def __post_init__(self):
        self.stage_depths = tuple(self.stage_depths)
        if len(self.stage_depths) != 4:
            raise ConfigError(f"EncoderConfig: expected 4 stage depths, got {len(self.stage_depths)}")
        if any(d < 1 for d in self.stage_depths):
            raise ConfigError("EncoderConfig: stage depths must be >= 1")
        kr = self.cardinality * self.radix
        for i in range(4):
            width = self.base_width * (2 ** i)
            if width % kr != 0:
                raise ConfigError(
                    f"EncoderConfig: stage {i + 1} width {width} not divisible by cardinality*radix={kr}"
                )

    def stage_widths(self):
        return tuple(self.base_width * (2 ** i) for i in range(4))


@dataclass
class FeaturePyramid:
    """f0: stem skip at full resolution; f1..f4 at strides 4, 8, 16, 32."""
    f0: torch.Tensor
    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor

    def stage_features(self):
        return (self.f1, self.f2, self.f3, self.f4)


class StemSkip(nn.Module):
    """Two 3x3 conv + ReLU layers at full resolution."""

    def __init__(self, in_channels, width, *, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(in_channels, width, 3, padding=1, rng=rng)
        self.conv2 = Conv2d(width, width, 3, padding=1, rng=rng)

    def forward(self, x):
        return nn_core.relu(self.conv2(nn_core.relu(self.conv1(x))))


class _ConvNormRelu(nn.Module):
    def __init__(self, in_channels, out_channels, stride, *, rng):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False, rng=rng)
        self.norm = GroupNorm2d(out_channels)

    def forward(self, x):
        return nn_core.relu(self.norm(self.conv(x)))


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, *, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        w = cfg.base_width
        self.stem_skip = StemSkip(cfg.input_channels, cfg.stem_skip_width, rng=rng)
        if cfg.deep_stem:
            self.stem = nn.Sequential(
                _ConvNormRelu(cfg.input_channels, w // 2, stride=2, rng=rng),
                _ConvNormRelu(w // 2, w // 2, stride=1, rng=rng),
                _ConvNormRelu(w // 2, w, stride=1, rng=rng),
            )
        else:
            self.stem = nn.Sequential(
                Conv2d(cfg.input_channels, w, 7, stride=2, padding=3, bias=False, rng=rng),
                GroupNorm2d(w),
                nn.ReLU(),
            )
        stages = []
        in_ch = w
        for i, depth in enumerate(cfg.stage_depths):
            out_ch = w * (2 ** i)
            blocks = []
            for b in range(depth):
                stride = 2 if (i > 0 and b == 0) else 1
                blocks.append(SplitAttentionBlock(
                    in_ch, out_ch, stride=stride,
                    cardinality=cfg.cardinality, radix=cfg.radix, rng=rng,
                ))
                in_ch = out_ch
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)

    def forward(self, x) -> FeaturePyramid:
        h, w = x.shape[-2:]
        if h % 32 != 0 or w % 32 != 0:
            raise ConfigError(f"Encoder: input spatial dims must be divisible by 32, got {h}x{w}")
        f0 = self.stem_skip(x)
        y = self.stem(x)
        y = nn_core.max_pool2d(y, 3, stride=2, padding=1)
        feats = []
        for stage in self.stages:
            y = stage(y)
            feats.append(y)
        return FeaturePyramid(f0, *feats)
