"""Multi-period and multi-scale waveform discriminators (no spectral-norm variants)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

from ..errors import StructuralError
from .generator import LRELU_SLOPE


@dataclass
class DiscriminatorConfig:
    periods: list = field(default_factory=lambda: [2, 3, 5, 7, 11])
    n_scales: int = 3
    mpd_channels: list = field(default_factory=lambda: [8, 16, 16])
    msd_channels: list = field(default_factory=lambda: [8, 16, 16])
    msd_kernel: int = 15

    def to_dict(self) -> dict:
        return asdict(self)


class PeriodDiscriminator(nn.Module):
    def __init__(self, period, channels=(8, 16, 32), kernel=5, stride=3):
        super().__init__()
        self.period = period
        convs = []
        c_in = 1
        for c in channels:
            convs.append(nn.Conv2d(c_in, c, (kernel, 1), (stride, 1), padding=(kernel // 2, 0)))
            c_in = c
        convs.append(nn.Conv2d(c_in, c_in, (kernel, 1), 1, padding=(kernel // 2, 0)))
        self.convs = nn.ModuleList(convs)
        self.conv_post = nn.Conv2d(c_in, 1, (3, 1), 1, padding=(1, 0))

    def fold(self, x: torch.Tensor) -> torch.Tensor:
        """(batch, n) -> (batch, 1, ceil(n / period), period), zero-padded at the end."""
        b, n = x.shape
        rem = (-n) % self.period
        if rem:
            x = F.pad(x, (0, rem))
        return x.view(b, 1, -1, self.period)

    def forward(self, x):
        x = self.fold(x)
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            feats.append(x)
        x = self.conv_post(x)
        feats.append(x)
        return x.flatten(1), feats


class ScaleDiscriminator(nn.Module):
    def __init__(self, channels=(8, 16, 16), kernel=15):
        super().__init__()
        convs = [nn.Conv1d(1, channels[0], 15, 1, padding=7)]
        c_in = channels[0]
        for c in channels[1:]:
            groups = 4 if c_in % 4 == 0 and c % 4 == 0 else 1
            convs.append(nn.Conv1d(c_in, c, kernel, 4, groups=groups, padding=kernel // 2))
            c_in = c
        convs.append(nn.Conv1d(c_in, c_in, 5, 1, padding=2))
        self.convs = nn.ModuleList(convs)
        self.conv_post = nn.Conv1d(c_in, 1, 3, 1, padding=1)

    def forward(self, x):
        x = x.unsqueeze(1)
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            feats.append(x)
        x = self.conv_post(x)
        feats.append(x)
        return x.flatten(1), feats


class DiscriminatorSet(nn.Module):
    """MPD sub-discriminators followed by MSD ones (raw plus average-pooled scales)."""

    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        cfg = cfg or DiscriminatorConfig()
        self.cfg = cfg
        self.mpd = nn.ModuleList(PeriodDiscriminator(p, cfg.mpd_channels) for p in cfg.periods)
        self.msd = nn.ModuleList(ScaleDiscriminator(cfg.msd_channels, cfg.msd_kernel) for _ in range(cfg.n_scales))

    def __len__(self):
        return len(self.mpd) + len(self.msd)

    def forward(self, wave):
        """Per sub-discriminator (score, features) for a (batch, n) wave."""
        out = [d(wave) for d in self.mpd]
        x = wave
        for i, d in enumerate(self.msd):
            if i > 0:
                x = F.avg_pool1d(x.unsqueeze(1), 4, 2, padding=2).squeeze(1)
            out.append(d(x))
        return out


def align(wave_real: torch.Tensor, wave_fake: torch.Tensor) -> torch.Tensor:
    """Trim or zero-pad ``wave_fake`` along time to the real length."""
    n = wave_real.shape[-1]
    m = wave_fake.shape[-1]
    if m > n:
        return wave_fake[..., :n]
    if m < n:
        return F.pad(wave_fake, (0, n - m))
    return wave_fake


def discriminate(wave_real, wave_fake, D: DiscriminatorSet):
    """List of (score_real, score_fake, features_real, features_fake), one per sub-discriminator."""
    wave_fake = align(wave_real, wave_fake)
    if wave_real.shape != wave_fake.shape:
        raise StructuralError(
            f"real {tuple(wave_real.shape)} and fake {tuple(wave_fake.shape)} differ after alignment"
        )
    real = D(wave_real)
    fake = D(wave_fake)
    return [(sr, sf, fr, ff) for (sr, fr), (sf, ff) in zip(real, fake)]
