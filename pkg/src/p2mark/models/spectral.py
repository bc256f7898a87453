"""Log-mel front-end shared by the losses, the watermark decoder and the metrics."""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from ..errors import ConfigurationError, InputLengthError

LOG_FLOOR = 1e-5


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    n_fft: int = 1024
    hop: int = 256
    window: int = 1024
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0

    def __post_init__(self):
        if not (0 < self.hop <= self.window <= self.n_fft):
            raise ConfigurationError(
                f"need 0 < hop <= window <= n_fft, got {self.hop}, {self.window}, {self.n_fft}"
            )
        if self.n_mels < 1:
            raise ConfigurationError("n_mels must be >= 1")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ConfigurationError(
                f"need 0 <= fmin < fmax <= sample_rate/2, got {self.fmin}, {self.fmax}"
            )

    @property
    def pad(self) -> int:
        # (n_fft - hop) split over both ends: frames == len // hop when hop divides len.
        return (self.n_fft - self.hop) // 2

    def n_frames(self, n_samples: int) -> int:
        return (n_samples + 2 * self.pad - self.n_fft) // self.hop + 1

    def to_dict(self) -> dict:
        return asdict(self)


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    mel = f / f_sp
    high = f >= min_log_hz
    mel = np.where(high, min_log_mel + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep, mel)
    return mel


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_band_edges(cfg: MelConfig) -> np.ndarray:
    """The n_mels + 2 corner frequencies (Hz); band i peaks at edges[i + 1]."""
    mels = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(mels)


@functools.lru_cache(maxsize=16)
def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular, area-normalised filters of shape (n_mels, n_fft // 2 + 1)."""
    freqs = np.linspace(0, cfg.sample_rate / 2, cfg.n_fft // 2 + 1)
    edges = mel_band_edges(cfg)
    widths = np.diff(edges)
    ramps = edges[:, None] - freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    fb = np.maximum(0.0, np.minimum(lower, upper))
    fb *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return fb


def stft_magnitude(wave: torch.Tensor, n_fft: int, hop: int, window: int, pad: int) -> torch.Tensor:
    """|STFT| with reflect padding of ``pad`` samples at each end; (..., n_fft//2+1, frames)."""
    shape = wave.shape
    x = wave.reshape(-1, shape[-1])
    if pad:
        x = torch.nn.functional.pad(x.unsqueeze(1), (pad, pad), mode="reflect").squeeze(1)
    win = torch.hann_window(window, dtype=wave.dtype, device=wave.device)
    spec = torch.stft(
        x, n_fft, hop_length=hop, win_length=window, window=win, center=False, return_complex=True
    )
    mag = spec.abs()
    return mag.reshape(*shape[:-1], *mag.shape[-2:])


def mel_spectrogram(wave, cfg: MelConfig) -> torch.Tensor:
    """Natural-log mel magnitudes floored at 1e-5, shape (..., n_mels, frames).

    Accepts numpy arrays or tensors of shape (..., samples); gradients flow
    through tensor inputs.
    """
    if not torch.is_tensor(wave):
        wave = torch.as_tensor(np.asarray(wave, dtype=np.float32))
    n = wave.shape[-1]
    if n < cfg.n_fft:
        raise InputLengthError(f"wave has {n} samples, shorter than n_fft={cfg.n_fft}")
    mag = stft_magnitude(wave, cfg.n_fft, cfg.hop, cfg.window, cfg.pad)
    fb = torch.from_numpy(mel_filterbank(cfg)).to(dtype=mag.dtype, device=mag.device)
    mel = torch.matmul(fb, mag)
    return torch.log(torch.clamp(mel, min=LOG_FLOOR))
