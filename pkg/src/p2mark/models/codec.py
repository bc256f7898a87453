"""Toy neural codec: conv encoder, residual vector quantizer, generator as decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

from ..errors import ConfigurationError
from .generator import LRELU_SLOPE, GeneratorConfig, ResBlock, ToyVocoder


@dataclass
class CodecConfig:
    latent_dim: int = 64
    n_quantizers: int = 4
    codebook_size: int = 64
    commitment: float = 0.25

    def to_dict(self) -> dict:
        return asdict(self)


def rvq_quantize(z: torch.Tensor, codebooks: torch.Tensor):
    """Residual vector quantization of latent frames.

    z: (batch, D, frames); codebooks: (N_q, V, D).
    Returns tokens (batch, N_q, frames), the quantized latent (same shape as z,
    differentiable w.r.t. the codebooks) and the Frobenius norm of the residual
    left after each stage, shape (N_q,).
    """
    if z.shape[1] != codebooks.shape[-1]:
        raise ConfigurationError(
            f"latent dimension {z.shape[1]} != codebook dimension {codebooks.shape[-1]}"
        )
    b, d, t = z.shape
    residual = z.detach().permute(0, 2, 1).reshape(-1, d)
    tokens, picked, norms = [], [], []
    for book in codebooks:
        dist = (
            residual.pow(2).sum(1, keepdim=True)
            - 2 * residual @ book.detach().T
            + book.detach().pow(2).sum(1)[None, :]
        )
        idx = dist.argmin(dim=1)
        q = book[idx]
        residual = residual - q.detach()
        tokens.append(idx)
        picked.append(q)
        norms.append(residual.norm())
    z_hat = torch.stack(picked).sum(0).reshape(b, t, d).permute(0, 2, 1)
    tokens = torch.stack(tokens).reshape(len(codebooks), b, t).permute(1, 0, 2)
    return tokens, z_hat, torch.stack(norms)


class ResidualVQ(nn.Module):
    """N_q codebooks of V entries; entry 0 of every codebook is pinned to the zero vector."""

    def __init__(self, n_quantizers, codebook_size, dim):
        super().__init__()
        self.codebooks = nn.Parameter(torch.randn(n_quantizers, codebook_size, dim) * 0.1)
        mask = torch.ones(n_quantizers, codebook_size, 1)
        mask[:, 0] = 0.0
        self.register_buffer("mask", mask, persistent=False)

    def effective_codebooks(self):
        return self.codebooks * self.mask

    def forward(self, z):
        return rvq_quantize(z, self.effective_codebooks())

    def lookup(self, tokens):
        books = self.effective_codebooks()
        parts = [books[q][tokens[:, q]] for q in range(books.shape[0])]
        return torch.stack(parts).sum(0).permute(0, 2, 1)


class CodecEncoder(nn.Module):
    """Mirror of the generator: conv, then (resblock, strided conv) per stage."""

    def __init__(self, gen_cfg: GeneratorConfig, latent_dim: int):
        super().__init__()
        ch = list(reversed(gen_cfg.channels))
        factors = list(reversed(gen_cfg.upsample_factors))
        self.conv_pre = nn.Conv1d(1, ch[0], 7, padding=3)
        self.blocks = nn.ModuleList(ResBlock(ch[i]) for i in range(len(factors)))
        self.downs = nn.ModuleList(
            nn.Conv1d(ch[i], ch[i + 1], 2 * f - f % 2, stride=f, padding=f // 2)
            for i, f in enumerate(factors)
        )
        self.conv_post = nn.Conv1d(ch[-1], latent_dim, 3, padding=1)

    def forward(self, wave):
        x = self.conv_pre(wave.unsqueeze(1))
        for rb, down in zip(self.blocks, self.downs):
            x = down(F.leaky_relu(rb(x), LRELU_SLOPE))
        return self.conv_post(F.leaky_relu(x, LRELU_SLOPE))


class ToyCodec(nn.Module):
    def __init__(self, gen_cfg: GeneratorConfig, cfg: CodecConfig | None = None):
        super().__init__()
        cfg = cfg or CodecConfig()
        if gen_cfg.in_channels != cfg.latent_dim:
            raise ConfigurationError("codec decoder input channels must equal the latent dimension")
        self.cfg = cfg
        self.encoder = CodecEncoder(gen_cfg, cfg.latent_dim)
        self.quantizer = ResidualVQ(cfg.n_quantizers, cfg.codebook_size, cfg.latent_dim)
        self.decoder = ToyVocoder(gen_cfg)

    def quantize(self, wave):
        """Tokens and straight-through quantized latent plus the VQ training loss."""
        z = self.encoder(wave)
        tokens, z_hat, _ = self.quantizer(z)
        vq_loss = F.mse_loss(z_hat, z.detach()) + self.cfg.commitment * F.mse_loss(z, z_hat.detach())
        z_st = z + (z_hat - z).detach()
        return tokens, z_st, vq_loss

    def forward(self, wave):
        _, z_q, vq_loss = self.quantize(wave)
        return self.decoder(z_q), vq_loss
