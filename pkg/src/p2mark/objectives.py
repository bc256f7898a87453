"""Training objectives: watermark BCE, least-squares adversarial terms,
feature matching, mel reconstruction and their weighted generator sum."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, PayloadShapeError, StructuralError
from .models.discriminators import align
from .models.spectral import MelConfig, mel_spectrogram

PROB_EPS = 1e-7


@dataclass
class LossWeights:
    lambda_fm: float = 2.0
    lambda_mel: float = 45.0

    def __post_init__(self):
        for name in ("lambda_fm", "lambda_mel"):
            v = float(getattr(self, name))
            if not (v >= 0 and v < float("inf")):
                raise ConfigurationError(f"{name} must be finite and non-negative, got {v}")

    def to_dict(self):
        return asdict(self)


def watermark_loss(probs: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy summed over bits and averaged over any leading batch dims."""
    w = torch.as_tensor(w, dtype=probs.dtype)
    if probs.shape != w.shape:
        raise PayloadShapeError(f"probabilities {tuple(probs.shape)} vs bits {tuple(w.shape)}")
    p = probs.clamp(PROB_EPS, 1 - PROB_EPS)
    per_bit = -(w * torch.log(p) + (1 - w) * torch.log1p(-p))
    return per_bit.sum(-1).mean()


def watermark_loss_from_logits(logits: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    return watermark_loss(torch.sigmoid(logits), w)


def adversarial_losses(scores_real, scores_fake):
    """(discriminator loss, generator adversarial loss), least-squares form,
    summed over sub-discriminators."""
    if len(scores_real) == 0 or len(scores_fake) == 0:
        raise StructuralError("no discriminator scores")
    if len(scores_real) != len(scores_fake):
        raise StructuralError("real and fake score lists differ in length")
    loss_d = 0.0
    loss_g = 0.0
    for sr, sf in zip(scores_real, scores_fake):
        loss_d = loss_d + torch.mean((sr - 1) ** 2) + torch.mean(sf**2)
        loss_g = loss_g + torch.mean((sf - 1) ** 2)
    return loss_d, loss_g


def discriminator_loss(scores_real, scores_fake):
    if len(scores_real) == 0:
        raise StructuralError("no discriminator scores")
    loss = 0.0
    for sr, sf in zip(scores_real, scores_fake):
        loss = loss + torch.mean((sr - 1) ** 2) + torch.mean(sf**2)
    return loss


def generator_adversarial_loss(scores_fake):
    if len(scores_fake) == 0:
        raise StructuralError("no discriminator scores")
    loss = 0.0
    for sf in scores_fake:
        loss = loss + torch.mean((sf - 1) ** 2)
    return loss


def feature_matching_loss(features_real, features_fake) -> torch.Tensor:
    """Sum over sub-discriminators and layers of the mean |real - fake|.

    Accepts either one list of feature maps or a list of such lists.
    """
    if len(features_real) != len(features_fake):
        raise StructuralError("feature lists differ in length")
    loss = 0.0
    for fr, ff in zip(features_real, features_fake):
        if isinstance(fr, (list, tuple)):
            loss = loss + feature_matching_loss(fr, ff)
            continue
        if fr.shape != ff.shape:
            raise StructuralError(f"feature shapes differ: {tuple(fr.shape)} vs {tuple(ff.shape)}")
        loss = loss + torch.mean(torch.abs(fr.detach() - ff))
    return loss if torch.is_tensor(loss) else torch.tensor(loss)


def mel_loss(wave_real, wave_fake, cfg: MelConfig) -> torch.Tensor:
    wave_fake = align(wave_real, wave_fake)
    if wave_real.shape != wave_fake.shape:
        raise StructuralError("waves differ in shape after alignment")
    return F.l1_loss(mel_spectrogram(wave_fake, cfg), mel_spectrogram(wave_real, cfg))


def generator_loss(adv, fm, mel, weights: LossWeights):
    return adv + weights.lambda_fm * fm + weights.lambda_mel * mel


def generator_terms(outputs, wave_real, wave_fake, mel_cfg: MelConfig, weights: LossWeights):
    """All generator-side terms for one batch given ``discriminate`` outputs."""
    adv = generator_adversarial_loss([o[1] for o in outputs])
    fm = feature_matching_loss([o[2] for o in outputs], [o[3] for o in outputs])
    mel = mel_loss(wave_real, wave_fake, mel_cfg)
    total = generator_loss(adv, fm, mel, weights)
    return total, {"adv": adv, "fm": fm, "mel": mel}
