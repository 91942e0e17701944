"""The three attention mechanisms: SE-style channel attention for the decoder,
an additive spatial gate on the skip connections, and the split-attention
residual unit used by the encoder backbone."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from . import nn_core
from .errors import ConfigError, DimensionError
from .nn_core import Conv2d, GroupNorm2d, InstanceNorm2d, Linear


class ChannelAttention(nn.Module):
    """Per-channel gate: GAP -> FC -> ReLU -> FC -> sigmoid, then rescale.

    The hidden width is ``channels // reduction`` floored at 4 so narrow
    decoder layers keep a usable bottleneck.
    """

    def __init__(self, channels, reduction=4, *, rng: np.random.Generator):
        super().__init__()
        if reduction < 1:
            raise ConfigError(f"ChannelAttention: reduction must be >= 1, got {reduction}")
        self.channels = channels
        hidden = max(channels // reduction, 4)
        self.fc1 = Linear(channels, hidden, rng=rng)
        self.fc2 = Linear(hidden, channels, rng=rng)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise DimensionError(
                f"ChannelAttention: expected {self.channels} channels, got {x.shape[1]}"
            )
        pooled = nn_core.global_avg_pool(x).flatten(1)
        scale = nn_core.sigmoid(self.fc2(nn_core.relu(self.fc1(pooled))))
        return x * scale[:, :, None, None]


class SpatialAttentionGate(nn.Module):
    """Additive attention gate over a skip connection.

    The coarser gating signal is bilinearly resampled up to the skip
    resolution; the two 1x1-projected sources are normalized independently
    (GN on the gating branch, IN on the skip branch), added, squashed to a
    single-channel logit map, and turned into a multiplicative per-pixel
    gate.  Returns (gated skip, alpha) so the alpha map can be plotted.
    """

    def __init__(self, skip_channels, gate_channels, inter_channels=None, *, rng: np.random.Generator):
        super().__init__()
        inter = max(skip_channels // 2, 4) if inter_channels is None else inter_channels
        if inter < 1:
            raise ConfigError(f"SpatialAttentionGate: inter_channels must be >= 1, got {inter}")
        self.wg = Conv2d(gate_channels, inter, 1, bias=False, rng=rng)
        self.gn = GroupNorm2d(inter)
        self.wx = Conv2d(skip_channels, inter, 1, bias=False, rng=rng)
        self.inorm = InstanceNorm2d(inter)
        self.psi = Conv2d(inter, 1, 1, bias=True, rng=rng)

    def forward(self, x, g):
        if x.shape[0] != g.shape[0]:
            raise DimensionError(
                f"SpatialAttentionGate: batch axis mismatch ({x.shape[0]} vs {g.shape[0]})"
            )
        if g.shape[2] > x.shape[2] or g.shape[3] > x.shape[3]:
            raise DimensionError(
                "SpatialAttentionGate: gating signal must be coarser than or equal to the skip"
            )
        g_up = nn_core.resize_bilinear(g, x.shape[-2:])
        q = self.psi(nn_core.relu(self.gn(self.wg(g_up)) + self.inorm(self.wx(x))))
        alpha = nn_core.sigmoid(q)
        return x * alpha, alpha


class SplitAttentionBlock(nn.Module):
    """Residual unit with radix-softmax attention over grouped conv branches.

    The 3x3 grouped conv produces ``radix`` branches per cardinal group
    (channel layout is radix-major: branch r occupies channels
    [r*out, (r+1)*out)).  Branches are summed, globally pooled and sent
    through FC -> ReLU -> FC to produce one logit per (branch, channel);
    a softmax across the radix (sigmoid when radix == 1) weights the
    branches.  Identity shortcut, or a strided 1x1 conv when the stride or
    channel count changes.
    """

    def __init__(self, in_channels, out_channels, stride=1, cardinality=1, radix=2,
                 *, rng: np.random.Generator):
        super().__init__()
        if cardinality < 1 or radix < 1:
            raise ConfigError(f"SplitAttentionBlock: cardinality/radix must be >= 1, got {cardinality}/{radix}")
        if out_channels % (cardinality * radix) != 0:
            raise ConfigError(
                f"SplitAttentionBlock: {out_channels} channels not divisible by "
                f"cardinality*radix = {cardinality * radix}"
            )
        self.radix = radix
        self.cardinality = cardinality
        self.out_channels = out_channels
        self.conv = Conv2d(in_channels, out_channels * radix, 3, stride=stride, padding=1,
                           groups=cardinality * radix, bias=False, rng=rng)
        self.norm = GroupNorm2d(out_channels * radix)
        hidden = max(out_channels // 4, 8)
        hidden += (-hidden) % cardinality
        self.fc1 = Conv2d(out_channels, hidden, 1, groups=cardinality, bias=True, rng=rng)
        self.fc2 = Conv2d(hidden, out_channels * radix, 1, groups=cardinality, bias=True, rng=rng)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Conv2d(in_channels, out_channels, 1, stride=stride, bias=False, rng=rng)
        else:
            self.shortcut = None

    def radix_weights(self, logits):
        """(N, out*radix, 1, 1) logits -> (N, radix, out) weights."""
        n = logits.shape[0]
        k, r, c = self.cardinality, self.radix, self.out_channels
        if r == 1:
            return nn_core.sigmoid(logits.view(n, 1, c))
        # fc2 output is cardinal-major: (cardinal group, radix, channels in group)
        w = nn_core.softmax(logits.view(n, k, r, c // k), axis=2)
        return w.permute(0, 2, 1, 3).reshape(n, r, c)

    def forward(self, x):
        y = nn_core.relu(self.norm(self.conv(x)))
        n, _, h, w = y.shape
        branches = y.view(n, self.radix, self.out_channels, h, w)
        pooled = nn_core.global_avg_pool(branches.sum(dim=1))
        logits = self.fc2(nn_core.relu(self.fc1(pooled)))
        weights = self.radix_weights(logits)
        out = (branches * weights[:, :, :, None, None]).sum(dim=1)
        identity = x if self.shortcut is None else self.shortcut(x)
        return out + identity
