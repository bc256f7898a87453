from .codec import CodecConfig, ResidualVQ, ToyCodec, rvq_quantize
from .discriminators import DiscriminatorConfig, DiscriminatorSet, align, discriminate
from .generator import GeneratorConfig, ToyVocoder, vocoder_forward
from .spectral import LOG_FLOOR, MelConfig, mel_filterbank, mel_spectrogram

__all__ = [
    "CodecConfig",
    "DiscriminatorConfig",
    "DiscriminatorSet",
    "GeneratorConfig",
    "LOG_FLOOR",
    "MelConfig",
    "ResidualVQ",
    "ToyCodec",
    "ToyVocoder",
    "align",
    "discriminate",
    "mel_filterbank",
    "mel_spectrogram",
    "rvq_quantize",
    "vocoder_forward",
]
