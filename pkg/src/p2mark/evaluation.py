"""Quality distances and the per-instance evaluation report."""

from __future__ import annotations

import csv
import hashlib
import importlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attacks import REPORT_COLUMNS, attack_battery, write_attack_report
from .errors import ConfigurationError, PayloadShapeError
from .models.spectral import LOG_FLOOR, MelConfig, mel_spectrogram, stft_magnitude
from .watermark import Watermark, WatermarkDecoder

STFT_RESOLUTIONS = ((512, 128, 512), (1024, 256, 1024), (2048, 512, 2048))


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x))
    return x.detach().to(torch.float64)


def _trim(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    n = min(a.shape[-1], b.shape[-1])
    return a[..., :n], b[..., :n]


def mel_distance(wave_a, wave_b, cfg: MelConfig | None = None) -> float:
    """Mean absolute difference between natural-log mel spectrograms."""
    cfg = cfg or MelConfig()
    a, b = _trim(wave_a, wave_b)
    return float((mel_spectrogram(a, cfg) - mel_spectrogram(b, cfg)).abs().mean())


def stft_terms(wave_a, wave_b, resolutions=STFT_RESOLUTIONS):
    """[(spectral convergence, log-magnitude L1)] per (n_fft, hop, window) resolution.

    Spectral convergence is taken in its symmetric form 2|A - B| / (|A| + |B|)
    on Frobenius norms, so the distance does not depend on argument order.
    """
    a, b = _trim(wave_a, wave_b)
    n = a.shape[-1]
    out = []
    for n_fft, hop, win in resolutions:
        if win > n or n_fft > n:
            raise ConfigurationError(f"STFT window {max(win, n_fft)} exceeds signal length {n}")
        A = stft_magnitude(a, n_fft, hop, win, pad=0)
        B = stft_magnitude(b, n_fft, hop, win, pad=0)
        denom = torch.linalg.vector_norm(A) + torch.linalg.vector_norm(B)
        sc = 0.0 if denom == 0 else float(2 * torch.linalg.vector_norm(A - B) / denom)
        log_l1 = float((A.clamp_min(LOG_FLOOR).log() - B.clamp_min(LOG_FLOOR).log()).abs().mean())
        out.append((sc, log_l1))
    return out


def stft_distance(wave_a, wave_b, resolutions=STFT_RESOLUTIONS) -> float:
    terms = stft_terms(wave_a, wave_b, resolutions)
    return sum(sc + ll for sc, ll in terms) / len(terms)


# --- optional perceptual metrics ---------------------------------------------------------


def _pesq(ref: np.ndarray, deg: np.ndarray, sr: int):
    try:
        pesq = importlib.import_module("pesq")
    except ImportError:
        return None
    if sr not in (8000, 16000):
        return None
    try:
        return float(pesq.pesq(sr, ref, deg, "wb" if sr == 16000 else "nb"))
    except Exception:  # noqa: BLE001 - the external scorer rejects e.g. silent input
        return None


def _stoi(ref: np.ndarray, deg: np.ndarray, sr: int):
    try:
        pystoi = importlib.import_module("pystoi")
    except ImportError:
        return None
    return float(pystoi.stoi(ref, deg, sr, extended=False))


QUALITY_HOOKS = {"pesq": _pesq, "stoi": _stoi}


# --- report ----------------------------------------------------------------------------------


def _short_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:8]


@dataclass
class EvalReport:
    watermark: str
    config_hash: str
    instance_hash: str
    reference: str
    items: list = field(default_factory=list)
    attacks: list = field(default_factory=list)
    quality_reference: str = "pretrained-output"

    @property
    def acc(self) -> float:
        return float(np.mean([r["acc"] for r in self.items]))

    @property
    def mel_distance(self) -> float:
        return float(np.mean([r["mel_distance"] for r in self.items]))

    @property
    def stft_distance(self) -> float:
        return float(np.mean([r["stft_distance"] for r in self.items]))

    def attack_acc(self, name: str):
        for row in self.attacks:
            if row["attack"] == name:
                return row["acc"]
        raise KeyError(name)

    def stem(self) -> str:
        return f"eval-{_short_hash(self.watermark)}-{self.config_hash}"

    def summary(self) -> str:
        lines = [
            f"watermark       {self.watermark}",
            f"instance        {self.instance_hash}",
            f"config          {self.config_hash}",
            f"quality vs      {self.quality_reference} ({self.reference})",
            f"items           {len(self.items)}",
            f"ACC             {self.acc:.4f}",
            f"mel distance    {self.mel_distance:.4f}",
            f"STFT distance   {self.stft_distance:.4f}",
        ]
        for key in QUALITY_HOOKS:
            vals = [r[key] for r in self.items if r.get(key) is not None]
            lines.append(f"{key.upper():<16}{np.mean(vals):.4f}" if vals else f"{key.upper():<16}n/a")
        if self.attacks:
            lines.append("")
            lines.append(f"{'attack':<14}{'ACC':>8}")
            for row in self.attacks:
                acc = "skipped" if row["skipped"] else f"{row['acc']:.4f}"
                lines.append(f"{row['attack']:<14}{acc:>8}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> dict:
        """Item CSV, attack CSV and text summary; returns the written paths."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = self.stem()
        paths = {
            "items": out_dir / f"{stem}.csv",
            "attacks": out_dir / f"{stem}-attacks.csv",
            "summary": out_dir / f"{stem}.txt",
        }
        cols = ["index", "acc", "mel_distance", "stft_distance", *QUALITY_HOOKS]
        tmp = paths["items"].with_name(f".{paths['items'].name}.tmp")
        with open(tmp, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for row in self.items:
                writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in cols})
        tmp.replace(paths["items"])
        write_attack_report(paths["attacks"], self.attacks)
        tmp = paths["summary"].with_name(f".{paths['summary'].name}.tmp")
        tmp.write_text(self.summary())
        tmp.replace(paths["summary"])
        return paths


@torch.no_grad()
def decode_batch(decoder: WatermarkDecoder, waves: torch.Tensor, mel_cfg: MelConfig) -> torch.Tensor:
    """Hard bits (batch, l) for a batch of equal-length waveforms."""
    logits = decoder(mel_spectrogram(waves.to(torch.float32), mel_cfg))
    return (logits >= 0).to(torch.float32)


def _accuracy(bits: torch.Tensor, w: Watermark) -> torch.Tensor:
    return (bits == w.as_tensor()).to(torch.float64).mean(dim=-1)


@torch.no_grad()
def evaluate_instance(instance, decoder: WatermarkDecoder, eval_set, reference, attacks=None, seed: int = 0) -> EvalReport:
    """Regenerate every eval item through ``instance`` and score extraction and quality.

    ``reference`` is the pretrained (unwatermarked) base model; quality distances
    compare the instance output with its output for the same features. ``attacks``
    is None (clean only), True (whole battery) or a list of battery row labels.
    """
    from .pipeline.training import instance_features

    if decoder.l != len(instance.watermark):
        raise PayloadShapeError(
            f"decoder reads {decoder.l} bits but the instance carries {len(instance.watermark)}"
        )
    cfg = instance.cfg
    waves = _as_tensor(eval_set).to(torch.float32)
    if waves.dim() == 1:
        waves = waves.unsqueeze(0)
    feats = instance_features(instance, waves)
    y = instance.generate(feats)
    y_ref = reference.generator(feats)
    w = instance.watermark
    clean = _accuracy(decode_batch(decoder, y, cfg.mel), w)

    items = []
    for i in range(len(y)):
        row = {
            "index": i,
            "acc": float(clean[i]),
            "mel_distance": mel_distance(y[i], y_ref[i], cfg.mel),
            "stft_distance": stft_distance(y[i], y_ref[i]),
        }
        ref_np, deg_np = y_ref[i].numpy().astype(np.float64), y[i].numpy().astype(np.float64)
        for key, hook in QUALITY_HOOKS.items():
            row[key] = hook(ref_np, deg_np, cfg.mel.sample_rate)
        items.append(row)

    report = EvalReport(
        watermark=w.to_string(),
        config_hash=cfg.config_hash(),
        instance_hash=instance.hash(),
        reference=f"pretrained:{getattr(instance, 'base_hash', '')}",
        items=items,
    )

    names = ["None"] if attacks in (None, False) else (None if attacks is True else list(attacks))
    if names is not None and "None" not in names:
        names = ["None", *names]
    per_row: dict = {}
    meta: dict = {}
    sr = cfg.mel.sample_rate
    y_np = y.numpy()
    for i in range(len(y)):
        for res in attack_battery(y_np[i], sr, seed=seed + i, names=names):
            meta[res.name] = res
            if res.skipped:
                continue
            if res.name == "None":
                acc = float(clean[i])
            else:
                bits = decode_batch(decoder, torch.from_numpy(np.ascontiguousarray(res.wave)).unsqueeze(0), cfg.mel)
                acc = float(_accuracy(bits, w)[0])
            per_row.setdefault(res.name, []).append(acc)
    for name, res in meta.items():
        accs = per_row.get(name)
        report.attacks.append(
            {
                "attack": name,
                "params": res.params,
                "acc": float(np.mean(accs)) if accs else None,
                "skipped": res.skipped,
                "reason": res.reason,
            }
        )
    # the None row is the clean aggregate by construction
    if report.attacks and report.attacks[0]["attack"] == "None":
        report.attacks[0]["acc"] = report.acc
    return report


__all__ = [
    "EvalReport",
    "QUALITY_HOOKS",
    "REPORT_COLUMNS",
    "STFT_RESOLUTIONS",
    "decode_batch",
    "evaluate_instance",
    "mel_distance",
    "stft_distance",
    "stft_terms",
]
