"""Binary watermarks, the embedding encoder that turns them into scaling vectors,
and the spectrogram decoder that recovers them."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import DomainError, FeatureShapeError, PayloadShapeError
from .models.spectral import MelConfig

MAX_BITS = 32


@dataclass(frozen=True)
class Watermark:
    bits: tuple

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if len(bits) < 1:
            raise DomainError("a watermark needs at least one bit")
        if any(b not in (0, 1) for b in bits):
            raise DomainError(f"watermark bits must be 0 or 1, got {self.bits!r}")
        object.__setattr__(self, "bits", bits)

    @property
    def l(self) -> int:
        return len(self.bits)

    def __len__(self):
        return len(self.bits)

    @classmethod
    def from_string(cls, text: str) -> "Watermark":
        if not text or any(c not in "01" for c in text):
            raise DomainError(f"watermark string must contain only '0' and '1', got {text!r}")
        return cls(tuple(int(c) for c in text))

    def to_string(self) -> str:
        return "".join(str(b) for b in self.bits)

    __str__ = to_string

    def complement(self) -> "Watermark":
        return Watermark(tuple(1 - b for b in self.bits))

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(self.bits, dtype=dtype)


def random_watermark(l: int, seed: int) -> Watermark:
    if l < 1:
        raise DomainError(f"watermark length must be >= 1, got {l}")
    rng = np.random.default_rng(seed)
    return Watermark(tuple(int(b) for b in rng.integers(0, 2, size=l)))


def random_bits(batch: int, l: int, generator: torch.Generator) -> torch.Tensor:
    """(batch, l) float tensor of independent fair bits."""
    return torch.randint(0, 2, (batch, l), generator=generator).float()


def bit_accuracy(w, w_hat) -> float:
    a = np.asarray(w.bits if isinstance(w, Watermark) else w).astype(int)
    b = np.asarray(w_hat.bits if isinstance(w_hat, Watermark) else w_hat).astype(int)
    if a.shape != b.shape:
        raise PayloadShapeError(f"watermark lengths differ: {a.shape[-1]} vs {b.shape[-1]}")
    return float((a == b).mean())


class WatermarkEncoder(nn.Module):
    """One learnable r-dimensional embedding per bit position.

    Rows start orthogonal and are weight-normalised (direction ``v``, gain ``g``).
    A set bit contributes its row, a clear bit contributes nothing, and the
    scaling vector is ``1 + sum(rows of set bits) / sqrt(l)``.
    """

    def __init__(self, l: int, rank: int):
        super().__init__()
        if l < 1 or rank < 1:
            raise DomainError("watermark length and rank must be positive")
        self.l = l
        self.rank = rank
        v = torch.empty(l, rank)
        nn.init.orthogonal_(v)
        self.v = nn.Parameter(v)
        self.g = nn.Parameter(v.norm(dim=1))

    @property
    def embedding_table(self) -> torch.Tensor:
        return self.g[:, None] * self.v / self.v.norm(dim=1, keepdim=True)

    def forward(self, bits: torch.Tensor) -> torch.Tensor:
        if bits.shape[-1] != self.l:
            raise PayloadShapeError(f"expected {self.l} watermark bits, got {bits.shape[-1]}")
        offset = torch.matmul(bits.to(self.v.dtype), self.embedding_table) / math.sqrt(self.l)
        return 1.0 + offset


def encode_watermark(w: Watermark, enc: WatermarkEncoder) -> torch.Tensor:
    """Scaling vector (length r) for a single watermark."""
    if len(w) != enc.l:
        raise PayloadShapeError(f"watermark has {len(w)} bits but the encoder expects {enc.l}")
    return enc(w.as_tensor(enc.v.dtype))


@dataclass
class DecoderConfig:
    channels: int = 32
    n_blocks: int = 4
    n_strided: int = 2

    def to_dict(self) -> dict:
        return asdict(self)


class ResBlock2d(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, padding=1)
        self.skip = None
        if stride != 1 or c_in != c_out:
            self.skip = nn.Conv2d(c_in, c_out, 1, stride)

    def forward(self, x):
        h = self.conv2(F.leaky_relu(self.conv1(x), 0.1))
        res = x if self.skip is None else self.skip(x)
        return F.leaky_relu(res + h, 0.1)


class WatermarkDecoder(nn.Module):
    """ResNet over (mel bin x frame) log-mels, mean-pooled over time, then a linear head.

    The per-example mean of the log-mel is removed first, so a global gain
    change of the audio (an additive log offset) does not reach the network.
    """

    min_frames = 4

    def __init__(self, mel_cfg: MelConfig, l: int, cfg: DecoderConfig | None = None):
        super().__init__()
        cfg = cfg or DecoderConfig()
        self.mel_cfg = mel_cfg
        self.l = l
        self.cfg = cfg
        self.stem = nn.Conv2d(1, cfg.channels, 3, padding=1)
        self.blocks = nn.Sequential(
            *(
                ResBlock2d(cfg.channels, cfg.channels, 2 if i < cfg.n_strided else 1)
                for i in range(cfg.n_blocks)
            )
        )
        freq = mel_cfg.n_mels
        for _ in range(min(cfg.n_strided, cfg.n_blocks)):
            freq = (freq - 1) // 2 + 1
        self.head = nn.Linear(cfg.channels * freq, l)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """Logits of shape (batch, l) for log-mels of shape (batch, n_mels, frames)."""
        if mel.dim() != 3 or mel.shape[1] != self.mel_cfg.n_mels:
            raise FeatureShapeError(
                f"expected (batch, {self.mel_cfg.n_mels}, frames), got {tuple(mel.shape)}"
            )
        if mel.shape[2] < self.min_frames:
            raise FeatureShapeError(f"need at least {self.min_frames} frames, got {mel.shape[2]}")
        x = mel - mel.mean(dim=(1, 2), keepdim=True)
        x = self.blocks(F.leaky_relu(self.stem(x.unsqueeze(1)), 0.1))
        x = x.mean(dim=3).flatten(1)
        return self.head(x)


def bits_from_logits(logits: torch.Tensor):
    probs = torch.sigmoid(logits)
    return probs, (probs >= 0.5).to(torch.int64)


@torch.no_grad()
def decode_watermark(mel: torch.Tensor, dec: WatermarkDecoder):
    """(probabilities, Watermark) from one log-mel (n_mels, frames)."""
    logits = dec(mel.unsqueeze(0))[0]
    probs, bits = bits_from_logits(logits)
    return probs, Watermark(tuple(bits.tolist()))
