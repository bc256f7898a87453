"""Parameter-level watermarking for audio generators via watermark-conditioned low-rank adapters."""

from .adapter import AdaptedGenerator, inject_adapters, merge_adapter, verify_merge_equivalence
from .attacks import AttackSpec, apply_attack, attack_battery
from .evaluation import EvalReport, evaluate_instance, mel_distance, stft_distance
from .watermark import Watermark, WatermarkDecoder, WatermarkEncoder, bit_accuracy, encode_watermark
from .wgopo import WGOPO, project

__version__ = "0.1.0"

__all__ = [
    "AdaptedGenerator",
    "AttackSpec",
    "EvalReport",
    "WGOPO",
    "Watermark",
    "WatermarkDecoder",
    "WatermarkEncoder",
    "apply_attack",
    "attack_battery",
    "bit_accuracy",
    "encode_watermark",
    "evaluate_instance",
    "inject_adapters",
    "mel_distance",
    "merge_adapter",
    "project",
    "stft_distance",
    "verify_merge_equivalence",
]
