"""Base-model pretraining, watermark-adapter fine-tuning and instance minting."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from ..adapter import AdaptedGenerator, inject_adapters
from ..errors import ConfigurationError, DivergenceError, PayloadShapeError, StructuralError
from ..models.codec import ToyCodec
from ..models.discriminators import DiscriminatorSet, discriminate
from ..models.generator import ToyVocoder
from ..models.spectral import mel_spectrogram
from ..objectives import discriminator_loss, generator_terms, watermark_loss_from_logits
from ..watermark import Watermark, WatermarkDecoder, WatermarkEncoder, encode_watermark, random_bits
from ..wgopo import WGOPO
from . import checkpoint as ckpt
from .config import TrainingConfig, config_from_dict

log = logging.getLogger(__name__)


def _check_finite(losses: dict, iteration: int):
    for name, v in losses.items():
        if not math.isfinite(v):
            raise DivergenceError(f"non-finite {name} loss at iteration {iteration}", iteration)


def _adam(params, lr, cfg: TrainingConfig):
    return torch.optim.Adam(params, lr=lr, betas=cfg.betas)


@dataclass
class BaseModel:
    """A pretrained waveform decoder with its discriminators (and codec front-end in codec mode)."""

    cfg: TrainingConfig
    generator: ToyVocoder
    discriminators: DiscriminatorSet
    codec: ToyCodec | None = None
    iteration: int = 0
    metrics: list = field(default_factory=list)

    @torch.no_grad()
    def features(self, wave: torch.Tensor) -> torch.Tensor:
        """Acoustic features the generator consumes: log-mels or quantized codec latents."""
        if self.cfg.mode == "vocoder":
            return mel_spectrogram(wave, self.cfg.mel)
        tokens, z_q, _ = self.codec.quantize(wave)
        return z_q.detach()

    @torch.no_grad()
    def generate(self, wave: torch.Tensor) -> torch.Tensor:
        return self.generator(self.features(wave))

    def tensors(self) -> dict:
        out = ckpt.prefixed("generator", self.generator.state_dict())
        out.update(ckpt.prefixed("discriminator", self.discriminators.state_dict()))
        if self.codec is not None:
            out.update(ckpt.prefixed("codec.encoder", self.codec.encoder.state_dict()))
            out["codec.quantizer.codebooks"] = self.codec.quantizer.effective_codebooks().detach()
        return out

    def metadata(self) -> dict:
        return {
            "kind": "base",
            "mode": self.cfg.mode,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.config_hash(),
            "iteration": self.iteration,
        }

    def save(self, path, force=False) -> str:
        return ckpt.save_checkpoint(path, self.tensors(), self.metadata(), force=force)

    def hash(self) -> str:
        return ckpt.state_hash(self.tensors())


def build_base(cfg: TrainingConfig) -> BaseModel:
    torch.manual_seed(cfg.seed)
    codec = ToyCodec(cfg.generator, cfg.codec) if cfg.mode == "codec" else None
    generator = codec.decoder if codec is not None else ToyVocoder(cfg.generator)
    return BaseModel(cfg, generator, DiscriminatorSet(cfg.discriminator), codec)


def load_base(path) -> BaseModel:
    tensors, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "base":
        raise StructuralError(f"{path} is a {meta.get('kind')} checkpoint, not a base model")
    cfg = config_from_dict(meta["config"])
    base = build_base(cfg)
    base.generator.load_state_dict(ckpt.unprefixed("generator", tensors))
    base.discriminators.load_state_dict(ckpt.unprefixed("discriminator", tensors))
    if base.codec is not None:
        base.codec.encoder.load_state_dict(ckpt.unprefixed("codec.encoder", tensors))
        with torch.no_grad():
            base.codec.quantizer.codebooks.copy_(tensors["codec.quantizer.codebooks"])
    base.iteration = int(meta.get("iteration", 0))
    return base


def _write_metrics(metrics, path):
    if path is None or not metrics:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(metrics[0])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in metrics:
            writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})


def pretrain_base(cfg: TrainingConfig, corpus, metrics_path=None) -> BaseModel:
    """GAN pretraining of the waveform decoder without any watermark terms."""
    base = build_base(cfg)
    gen_params = list(base.generator.parameters())
    if base.codec is not None:
        gen_params += list(base.codec.encoder.parameters()) + list(base.codec.quantizer.parameters())
    opt_g = _adam(gen_params, cfg.lr_generator, cfg)
    opt_d = _adam(base.discriminators.parameters(), cfg.lr_discriminator, cfg)
    batches = corpus.batches(cfg.batch_size, cfg.segment_length, cfg.seed)
    for it in range(1, cfg.pretrain_iterations + 1):
        x = next(batches)
        if base.codec is not None:
            y_hat, vq = base.codec(x)
        else:
            y_hat, vq = base.generator(mel_spectrogram(x, cfg.mel)), torch.zeros(())

        out = discriminate(x, y_hat.detach(), base.discriminators)
        loss_d = discriminator_loss([o[0] for o in out], [o[1] for o in out])
        opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        opt_d.step()

        base.discriminators.requires_grad_(False)
        out = discriminate(x, y_hat, base.discriminators)
        loss_g, parts = generator_terms(out, x, y_hat, cfg.mel, cfg.losses)
        opt_g.zero_grad(set_to_none=True)
        (loss_g + vq).backward()
        opt_g.step()
        base.discriminators.requires_grad_(True)

        row = {
            "iteration": it,
            "loss_d": loss_d.item(),
            "loss_g": loss_g.item(),
            "adv": parts["adv"].item(),
            "fm": parts["fm"].item(),
            "mel": parts["mel"].item(),
            "vq": float(vq),
        }
        _check_finite(row, it)
        base.metrics.append(row)
        if it % cfg.log_every == 0:
            log.info("pretrain %d: d=%.4f g=%.4f mel=%.4f", it, row["loss_d"], row["loss_g"], row["mel"])
    base.iteration = cfg.pretrain_iterations
    _write_metrics(base.metrics, metrics_path)
    return base


@dataclass
class P2MarkSystem:
    """A trained watermark adapter together with its encoder, decoder and discriminators."""

    cfg: TrainingConfig
    base: BaseModel
    adapted: AdaptedGenerator
    encoder: WatermarkEncoder
    decoder: WatermarkDecoder
    discriminators: DiscriminatorSet
    iteration: int = 0
    metrics: list = field(default_factory=list)
    projections_fired: int = 0

    def scaling(self, w: Watermark) -> torch.Tensor:
        with torch.no_grad():
            return encode_watermark(w, self.encoder)

    @torch.no_grad()
    def generate(self, features: torch.Tensor, w: Watermark) -> torch.Tensor:
        """Adapter-conditioned generation (no merging)."""
        return self.adapted(features, self.scaling(w))

    def tensors(self) -> dict:
        out = {}
        for name, p in self.adapted.lora_named_parameters():
            out[f"adapter.{name}"] = p.detach()
        out.update(ckpt.prefixed("wm_encoder", self.encoder.state_dict()))
        out.update(ckpt.prefixed("wm_decoder", self.decoder.state_dict()))
        out.update(ckpt.prefixed("discriminator", self.discriminators.state_dict()))
        return out

    def metadata(self) -> dict:
        return {
            "kind": "adapter",
            "mode": self.cfg.mode,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.config_hash(),
            "iteration": self.iteration,
            "base_hash": self.base.hash(),
            "adapted_layers": list(self.adapted.adapter_names),
            "l": self.cfg.l,
            "r": self.cfg.r,
        }

    def save(self, path, force=False) -> str:
        return ckpt.save_checkpoint(path, self.tensors(), self.metadata(), force=force)


def build_system(cfg: TrainingConfig, base: BaseModel) -> P2MarkSystem:
    if base.cfg.mode != cfg.mode:
        raise ConfigurationError(f"base model is {base.cfg.mode} but the run is {cfg.mode}")
    if base.cfg.generator.to_dict() != cfg.generator.to_dict():
        raise ConfigurationError("generator configuration differs from the pretrained model")
    torch.manual_seed(cfg.seed)
    adapted = inject_adapters(base.generator, cfg.r, cfg.layer_selector)
    encoder = WatermarkEncoder(cfg.l, cfg.r)
    decoder = WatermarkDecoder(cfg.mel, cfg.l, cfg.decoder)
    discriminators = DiscriminatorSet(cfg.discriminator)
    discriminators.load_state_dict(base.discriminators.state_dict())
    return P2MarkSystem(cfg, base, adapted, encoder, decoder, discriminators)


def load_system(path, base: BaseModel) -> P2MarkSystem:
    tensors, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "adapter":
        raise StructuralError(f"{path} is a {meta.get('kind')} checkpoint, not an adapter")
    cfg = config_from_dict(meta["config"])
    if meta.get("base_hash") and meta["base_hash"] != base.hash():
        raise StructuralError("adapter was trained on a different base model")
    system = build_system(cfg, base)
    lora = ckpt.unprefixed("adapter", tensors)
    with torch.no_grad():
        for name, p in system.adapted.lora_named_parameters():
            p.copy_(lora[name])
    system.encoder.load_state_dict(ckpt.unprefixed("wm_encoder", tensors))
    system.decoder.load_state_dict(ckpt.unprefixed("wm_decoder", tensors))
    system.discriminators.load_state_dict(ckpt.unprefixed("discriminator", tensors))
    system.iteration = int(meta.get("iteration", 0))
    return system


def load_decoder(path):
    """(WatermarkDecoder, TrainingConfig) from an adapter checkpoint."""
    tensors, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "adapter":
        raise StructuralError(f"{path} is a {meta.get('kind')} checkpoint, not an adapter")
    cfg = config_from_dict(meta["config"])
    dec = WatermarkDecoder(cfg.mel, cfg.l, cfg.decoder)
    dec.load_state_dict(ckpt.unprefixed("wm_decoder", tensors))
    return dec, cfg


def _decoder_view(y: torch.Tensor, crop: int, gen: torch.Generator) -> torch.Tensor:
    """Random per-example crops of ``crop`` samples, so the decoder cannot rely on
    artifacts at the segment boundaries."""
    n = y.shape[-1]
    if not crop or crop >= n:
        return y
    starts = torch.randint(0, n - crop + 1, (y.shape[0],), generator=gen)
    return torch.stack([y[i, s : s + crop] for i, s in enumerate(starts.tolist())])


def train_p2mark(cfg: TrainingConfig, corpus, base: BaseModel, metrics_path=None) -> P2MarkSystem:
    """Fine-tune the watermark adapter on a frozen base, one D / WM / G update per batch."""
    system = build_system(cfg, base)
    adapted, enc, dec, disc = system.adapted, system.encoder, system.decoder, system.discriminators
    lora = list(adapted.lora_named_parameters())
    lora_params = [p for _, p in lora]

    opt_d = _adam(disc.parameters(), cfg.lr_discriminator, cfg)
    opt_wm = _adam(lora_params + list(enc.parameters()) + list(dec.parameters()), cfg.lr_watermark, cfg)
    opt_g = _adam(lora_params, cfg.lr_generator, cfg)
    store = WGOPO(lora, enabled=cfg.wgopo_enabled)

    batches = corpus.batches(cfg.batch_size, cfg.segment_length, cfg.seed)
    bit_gen = torch.Generator().manual_seed(cfg.seed + 7919)
    crop_gen = torch.Generator().manual_seed(cfg.seed + 104729)
    for it in range(1, cfg.max_iterations + 1):
        x = next(batches)
        w = random_bits(cfg.batch_size, cfg.l, bit_gen)
        z = base.features(x)

        y_hat = adapted(z, enc(w))

        # discriminator
        out = discriminate(x, y_hat.detach(), disc)
        loss_d = discriminator_loss([o[0] for o in out], [o[1] for o in out])
        opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        opt_d.step()

        # watermark: adapter + encoder + decoder; keep the adapter gradient
        logits = dec(mel_spectrogram(_decoder_view(y_hat, cfg.decode_crop, crop_gen), cfg.mel))
        loss_wm = watermark_loss_from_logits(logits, w)
        opt_wm.zero_grad(set_to_none=True)
        loss_wm.backward()
        store.capture()
        opt_wm.step()

        # generator: re-run with the updated adapter, project against the stored gradient
        with torch.no_grad():
            s = enc(w)
        y_hat = adapted(z, s)
        disc.requires_grad_(False)
        out = discriminate(x, y_hat, disc)
        loss_g, parts = generator_terms(out, x, y_hat, cfg.mel, cfg.losses)
        opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        fired = store.project_pending()
        opt_g.step()
        disc.requires_grad_(True)

        acc = float(((logits > 0).float() == w).float().mean())
        row = {
            "iteration": it,
            "loss_d": loss_d.item(),
            "loss_wm": loss_wm.item(),
            "loss_g": loss_g.item(),
            "adv": parts["adv"].item(),
            "fm": parts["fm"].item(),
            "mel": parts["mel"].item(),
            "train_acc": acc,
            "projected": int(fired),
            "projections_fired": store.fired,
        }
        _check_finite(row, it)
        system.metrics.append(row)
        if it % cfg.log_every == 0:
            log.info(
                "train %d: wm=%.4f acc=%.3f mel=%.4f fired=%d",
                it, row["loss_wm"], acc, row["mel"], store.fired,
            )
    system.iteration = cfg.max_iterations
    system.projections_fired = store.fired
    _write_metrics(system.metrics, metrics_path)
    return system


# --- minting -------------------------------------------------------------------


@dataclass
class Instance:
    """A merged, watermarked generator ready for release."""

    cfg: TrainingConfig
    generator: ToyVocoder
    watermark: Watermark
    base_hash: str
    adapter_hash: str = ""
    codec: ToyCodec | None = None

    def tensors(self) -> dict:
        out = ckpt.prefixed("generator", self.generator.state_dict())
        if self.codec is not None:
            out.update(ckpt.prefixed("codec.encoder", self.codec.encoder.state_dict()))
            out["codec.quantizer.codebooks"] = self.codec.quantizer.effective_codebooks().detach()
        return out

    def metadata(self) -> dict:
        return {
            "kind": "instance",
            "mode": self.cfg.mode,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.config_hash(),
            "watermark": self.watermark.to_string(),
            "base_hash": self.base_hash,
            "adapter_hash": self.adapter_hash,
        }

    def save(self, path, force=False) -> str:
        return ckpt.save_checkpoint(path, self.tensors(), self.metadata(), force=force)

    def hash(self) -> str:
        return ckpt.state_hash(self.tensors())

    @torch.no_grad()
    def generate(self, features):
        return self.generator(features)


def mint_instance(system: P2MarkSystem, w: Watermark) -> Instance:
    """Merge every adapter under s = encode(w) into a plain generator; no training involved."""
    if len(w) != system.cfg.l:
        raise PayloadShapeError(f"watermark has {len(w)} bits, the adapter was trained with l={system.cfg.l}")
    s = system.scaling(w)
    gen = ToyVocoder(system.cfg.generator)
    gen.load_state_dict(system.adapted.merged_state_dict(s))
    gen.eval()
    return Instance(
        system.cfg,
        gen,
        w,
        base_hash=system.base.hash(),
        adapter_hash=ckpt.state_hash(system.tensors()),
        codec=system.base.codec,
    )


def load_instance(path) -> Instance:
    tensors, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "instance":
        raise StructuralError(f"{path} is a {meta.get('kind')} checkpoint, not an instance")
    cfg = config_from_dict(meta["config"])
    gen = ToyVocoder(cfg.generator)
    gen.load_state_dict(ckpt.unprefixed("generator", tensors))
    codec = None
    if cfg.mode == "codec":
        codec = ToyCodec(cfg.generator, cfg.codec)
        codec.encoder.load_state_dict(ckpt.unprefixed("codec.encoder", tensors))
        with torch.no_grad():
            codec.quantizer.codebooks.copy_(tensors["codec.quantizer.codebooks"])
        codec.decoder = gen
    return Instance(
        cfg, gen, Watermark.from_string(meta["watermark"]), meta.get("base_hash", ""),
        meta.get("adapter_hash", ""), codec,
    )


def instance_features(instance: Instance, wave: torch.Tensor) -> torch.Tensor:
    if instance.cfg.mode == "vocoder":
        return mel_spectrogram(wave, instance.cfg.mel)
    with torch.no_grad():
        return instance.codec.quantize(wave)[1]
