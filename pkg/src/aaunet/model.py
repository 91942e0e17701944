"""Model assembly: reduced skips, spatial gates, channel-attention decoder
blocks and the segmentation head, plus the two ablation switches.

Decoder ladder: the stream starts at the deepest stage output (stride 32)
and consumes the reduced skips deepest-first.  Each level concatenates the
(gated, grid-matched) skip with the stream, applies 3x3 conv + GN + ReLU to
the level width, bilinearly upsamples, and optionally applies channel
attention.  The first level upsamples by 4 — the pyramid spans a factor 32
but has four decoder levels, so one jump must be double-sized for the head
to land back at full input resolution; spending it at the coarsest level
costs the least spatial detail.  The final level consumes the stem skip and
emits full-resolution features for the 1x1 classification head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import nn_core
from .attention import ChannelAttention, SpatialAttentionGate
from .encoder import Encoder, EncoderConfig
from .errors import ConfigError, DimensionError
from .nn_core import Conv2d, GroupNorm2d


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_widths: tuple = (128, 64, 32, 16)
    skip_reduced_widths: tuple = None
    use_space_attention: bool = True
    use_channel_attention: bool = True
    num_classes: int = 8
    ca_reduction: int = 4

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        self.decoder_widths = tuple(self.decoder_widths)
        if len(self.decoder_widths) != 4:
            raise ConfigError(f"ModelConfig: expected 4 decoder widths, got {len(self.decoder_widths)}")
        if self.skip_reduced_widths is None:
            self.skip_reduced_widths = self.decoder_widths
        self.skip_reduced_widths = tuple(self.skip_reduced_widths)
        if len(self.skip_reduced_widths) != 4:
            raise ConfigError("ModelConfig: expected 4 skip widths")
        if self.num_classes < 2:
            raise ConfigError(f"ModelConfig: num_classes must be >= 2, got {self.num_classes}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "encoder" in d and isinstance(d["encoder"], dict):
            d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)


class SkipReduce(nn.Module):
    """1x1 conv + ReLU narrowing a skip connection."""

    def __init__(self, in_channels, target_width, *, rng: np.random.Generator):
        super().__init__()
        if target_width > in_channels:
            raise ConfigError(
                f"SkipReduce: target width {target_width} exceeds input width {in_channels}"
            )
        self.conv = Conv2d(in_channels, target_width, 1, rng=rng)

    def forward(self, x):
        return nn_core.relu(self.conv(x))


class DecoderBlock(nn.Module):
    """concat -> 3x3 conv + GN + ReLU -> bilinear upsample -> channel attention."""

    def __init__(self, prev_channels, skip_channels, width, up_factor=2,
                 use_channel_attention=True, ca_reduction=4, *, rng: np.random.Generator):
        super().__init__()
        self.up_factor = up_factor
        self.conv = Conv2d(prev_channels + skip_channels, width, 3, padding=1, bias=False, rng=rng)
        self.norm = GroupNorm2d(width)
        if use_channel_attention:
            self.channel_attn = ChannelAttention(width, reduction=ca_reduction, rng=rng)
        else:
            self.channel_attn = None

    def forward(self, prev, skip):
        if prev.shape[-2:] != skip.shape[-2:]:
            raise DimensionError(
                f"DecoderBlock: spatial mismatch {tuple(prev.shape[-2:])} vs {tuple(skip.shape[-2:])}"
            )
        y = torch.cat([prev, skip], dim=1)
        y = nn_core.relu(self.norm(self.conv(y)))
        y = nn_core.upsample_bilinear(y, self.up_factor)
        if self.channel_attn is not None:
            y = self.channel_attn(y)
        return y


class AllAttentionUNet(nn.Module):
    """Encoder + gated path aggregation + channel-attention decoder."""

    UP_FACTORS = (4, 2, 2, 2)

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg.encoder, rng=rng)

        enc_widths = cfg.encoder.stage_widths()
        # skips consumed deepest-first: f3, f2, f1, then the stem skip f0
        skip_in = (enc_widths[2], enc_widths[1], enc_widths[0], cfg.encoder.stem_skip_width)
        gate_in = []  # channels of the gating signal at each level
        self.skip_reduce = nn.ModuleList()
        prev_ch = enc_widths[3]
        blocks = []
        for i in range(4):
            reduced = cfg.skip_reduced_widths[i]
            self.skip_reduce.append(SkipReduce(skip_in[i], reduced, rng=rng))
            gate_in.append(prev_ch)
            blocks.append(DecoderBlock(
                prev_ch, reduced, cfg.decoder_widths[i], up_factor=self.UP_FACTORS[i],
                use_channel_attention=cfg.use_channel_attention,
                ca_reduction=cfg.ca_reduction, rng=rng,
            ))
            prev_ch = cfg.decoder_widths[i]
        self.decoder_blocks = nn.ModuleList(blocks)
        if cfg.use_space_attention:
            self.space_gates = nn.ModuleList(
                SpatialAttentionGate(cfg.skip_reduced_widths[i], gate_in[i], rng=rng)
                for i in range(4)
            )
        else:
            self.space_gates = None
        self.head = Conv2d(prev_ch, cfg.num_classes, 1, rng=rng)

    def forward(self, x, return_attention=False):
        pyramid = self.encoder(x)
        skips = (pyramid.f3, pyramid.f2, pyramid.f1, pyramid.f0)
        state = pyramid.f4
        alphas = []
        for i in range(4):
            skip = self.skip_reduce[i](skips[i])
            if self.space_gates is not None:
                skip, alpha = self.space_gates[i](skip, state)
                alphas.append(alpha)
            skip = nn_core.resize_bilinear(skip, state.shape[-2:])
            state = self.decoder_blocks[i](state, skip)
        logits = self.head(state)
        if return_attention:
            return logits, alphas
        return logits

    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())


def predict_mask(logits):
    """Per-pixel argmax over the class axis; ties go to the lower class index."""
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    if logits.ndim != 4:
        raise DimensionError(f"predict_mask: expected NCHW logits, got rank {logits.ndim}")
    return np.argmax(logits, axis=1).astype(np.uint8)
