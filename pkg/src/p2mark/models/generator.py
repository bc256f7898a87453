"""Fully convolutional HiFi-GAN-style generator at desk scale."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

from ..errors import ConfigurationError, FeatureShapeError

LRELU_SLOPE = 0.1


@dataclass
class GeneratorConfig:
    in_channels: int = 80
    channels: list = field(default_factory=lambda: [64, 32, 16, 8])
    upsample_factors: list = field(default_factory=lambda: [8, 8, 4])
    resblock_kernel: int = 3
    resblock_dilations: list = field(default_factory=lambda: [1, 3])

    def __post_init__(self):
        if len(self.channels) != len(self.upsample_factors) + 1:
            raise ConfigurationError("need one more channel width than upsample stages")
        if any(u < 1 for u in self.upsample_factors) or any(c < 1 for c in self.channels):
            raise ConfigurationError("channel widths and upsample factors must be positive")

    @property
    def hop(self) -> int:
        u = 1
        for f in self.upsample_factors:
            u *= f
        return u

    def to_dict(self) -> dict:
        return asdict(self)


def _same_padding(kernel: int, dilation: int = 1) -> int:
    return (kernel * dilation - dilation) // 2


class ResBlock(nn.Module):
    def __init__(self, channels, kernel=3, dilations=(1, 3)):
        super().__init__()
        self.convs1 = nn.ModuleList(
            nn.Conv1d(channels, channels, kernel, dilation=d, padding=_same_padding(kernel, d))
            for d in dilations
        )
        self.convs2 = nn.ModuleList(
            nn.Conv1d(channels, channels, kernel, padding=_same_padding(kernel)) for _ in dilations
        )

    def forward(self, x):
        for c1, c2 in zip(self.convs1, self.convs2):
            h = c1(F.leaky_relu(x, LRELU_SLOPE))
            x = x + c2(F.leaky_relu(h, LRELU_SLOPE))
        return x


def upsample_layer(c_in, c_out, factor):
    # kernel - 2 * padding == factor, so the output is exactly factor x longer
    kernel = 2 * factor - factor % 2
    return nn.ConvTranspose1d(c_in, c_out, kernel, stride=factor, padding=factor // 2)


class ToyVocoder(nn.Module):
    """Maps (batch, in_channels, frames) features to (batch, frames * hop) waveforms."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        self.conv_pre = nn.Conv1d(cfg.in_channels, ch[0], 7, padding=3)
        self.ups = nn.ModuleList(
            upsample_layer(ch[i], ch[i + 1], u) for i, u in enumerate(cfg.upsample_factors)
        )
        self.resblocks = nn.ModuleList(
            ResBlock(ch[i + 1], cfg.resblock_kernel, cfg.resblock_dilations)
            for i in range(len(cfg.upsample_factors))
        )
        self.conv_post = nn.Conv1d(ch[-1], 1, 7, padding=3)

    @property
    def hop(self) -> int:
        return self.cfg.hop

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.dim() != 3 or features.shape[1] != self.cfg.in_channels:
            raise FeatureShapeError(
                f"expected (batch, {self.cfg.in_channels}, frames), got {tuple(features.shape)}"
            )
        x = self.conv_pre(features)
        for up, rb in zip(self.ups, self.resblocks):
            x = up(F.leaky_relu(x, LRELU_SLOPE))
            x = rb(x)
        x = self.conv_post(F.leaky_relu(x))
        return torch.tanh(x).squeeze(1)


def vocoder_forward(mel: torch.Tensor, gen: ToyVocoder) -> torch.Tensor:
    squeeze = mel.dim() == 2
    if squeeze:
        mel = mel.unsqueeze(0)
    wave = gen(mel)
    return wave[0] if squeeze else wave
