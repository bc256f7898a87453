"""Run configuration: one YAML file fully determines a run; its hash is stamped into manifests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..errors import ConfigurationError
from ..models.codec import CodecConfig
from ..models.discriminators import DiscriminatorConfig
from ..models.generator import GeneratorConfig
from ..models.spectral import MelConfig
from ..objectives import LossWeights
from ..watermark import MAX_BITS, DecoderConfig

MODES = ("vocoder", "codec")


@dataclass
class TrainingConfig:
    mode: str = "vocoder"
    l: int = 16
    r: int = 32
    batch_size: int = 16
    segment_length: int = 8192
    lr_generator: float = 2e-4
    lr_discriminator: float = 2e-4
    lr_watermark: float = 2e-4
    betas: tuple = (0.8, 0.99)
    max_iterations: int = 1000
    pretrain_iterations: int = 1000
    seed: int = 0
    wgopo_enabled: bool = True
    layer_selector: str = "conv1d"
    # samples of generated audio the decoder sees in the watermark step; 0 means the
    # whole segment, a shorter value decodes a random crop per example
    decode_crop: int = 0
    log_every: int = 50
    losses: LossWeights = field(default_factory=LossWeights)
    mel: MelConfig = field(default_factory=MelConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("l", "r", "batch_size", "segment_length", "log_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("max_iterations", "pretrain_iterations"):
            if int(getattr(self, name)) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.l > MAX_BITS:
            raise ConfigurationError(f"watermark capacity above {MAX_BITS} bits is not supported")
        for name in ("lr_generator", "lr_discriminator", "lr_watermark"):
            if not float(getattr(self, name)) > 0:
                raise ConfigurationError(f"{name} must be positive")
        expected_in = self.mel.n_mels if self.mode == "vocoder" else self.codec.latent_dim
        if self.generator.in_channels != expected_in:
            raise ConfigurationError(
                f"generator.in_channels={self.generator.in_channels} but {self.mode} features have "
                f"{expected_in} channels"
            )
        if self.generator.hop != self.mel.hop:
            raise ConfigurationError(
                f"generator upsampling {self.generator.hop} must equal the mel hop {self.mel.hop}"
            )
        if self.segment_length < self.mel.n_fft or self.segment_length % self.mel.hop:
            raise ConfigurationError("segment_length must be >= n_fft and a multiple of the hop")
        if self.decode_crop and not (self.mel.n_fft <= self.decode_crop <= self.segment_length):
            raise ConfigurationError("decode_crop must be 0 or between n_fft and segment_length")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "TrainingConfig":
        return config_from_dict({**self.to_dict(), **changes})


_NESTED = {
    "losses": LossWeights,
    "mel": MelConfig,
    "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig,
    "decoder": DecoderConfig,
    "codec": CodecConfig,
}


def _build(cls, data, where):
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigurationError(f"bad {where}: {exc}") from exc


def config_from_dict(data: dict) -> TrainingConfig:
    data = dict(data or {})
    known = {f.name for f in dataclasses.fields(TrainingConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown configuration key(s): {sorted(unknown)}")
    for key, cls in _NESTED.items():
        if key in data:
            data[key] = _build(cls, data[key], key)
    mode = data.get("mode", "vocoder")
    # codec mode feeds latent frames to the generator unless told otherwise
    if mode == "codec" and "generator" not in data:
        codec = data.get("codec", CodecConfig())
        data["generator"] = GeneratorConfig(in_channels=codec.latent_dim)
    return TrainingConfig(**data)


def load_config(path) -> TrainingConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config {path} is not valid YAML: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: TrainingConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def toy_config(**overrides) -> TrainingConfig:
    """The desk-scale setup used by the acceptance suite (vocoder, l=8, r=16, batch 16)."""
    base = dict(
        mode="vocoder",
        l=8,
        r=16,
        batch_size=16,
        segment_length=4096,
        decode_crop=2048,
        max_iterations=3000,
        pretrain_iterations=300,
        lr_watermark=1e-3,
        # adapt the input conv and the first two residual stacks only; single-dilation
        # residual blocks and a trimmed discriminator set keep an iteration near 0.4 s on one core
        layer_selector=r"^(conv_pre|resblocks\.[01]\.)",
        generator=dict(resblock_dilations=[1]),
        discriminator=dict(periods=[2, 3, 5], n_scales=2),
    )
    base.update(overrides)
    return config_from_dict(base)
