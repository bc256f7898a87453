"""Audio ingestion and the deterministic synthetic corpus."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal
import torch

from ..errors import IngestionError

PEAK = 0.95


def read_wav(path):
    """(float32 mono samples in [-1, 1], sample rate) from a 16-bit or float PCM WAV."""
    try:
        sr, data = scipy.io.wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    if data.ndim != 1:
        raise IngestionError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        x = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float32) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float32)
    else:
        raise IngestionError(f"{path}: unsupported sample format {data.dtype}")
    return x, int(sr)


def write_wav(path, wave, sr: int):
    """Float32 WAV; values are written as-is (no clipping)."""
    wave = np.asarray(wave, dtype=np.float32)
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    scipy.io.wavfile.write(tmp, sr, wave)
    tmp.replace(path)


def normalize(x: np.ndarray) -> np.ndarray:
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    if peak == 0.0:
        return x.astype(np.float32)
    return (x * (PEAK / peak)).astype(np.float32)


def fit_segment(x: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Random crop of longer clips, reflect-pad of shorter ones."""
    n = len(x)
    if n > length:
        start = int(rng.integers(0, n - length + 1))
        return x[start : start + length]
    if n < length:
        if n == 1:
            return np.full(length, x[0], dtype=x.dtype)
        return np.pad(x, (0, length - n), mode="reflect")
    return x


class AudioCorpus:
    """A list of normalised mono clips at one sample rate."""

    def __init__(self, clips, sample_rate: int):
        if not clips:
            raise IngestionError("dataset is empty")
        self.clips = [np.asarray(c, dtype=np.float32) for c in clips]
        self.sample_rate = sample_rate

    def __len__(self):
        return len(self.clips)

    def segments(self, segment_length: int, seed: int) -> np.ndarray:
        """One segment per clip, (n_clips, segment_length)."""
        rng = np.random.default_rng(seed)
        return np.stack([fit_segment(c, segment_length, rng) for c in self.clips])

    def batches(self, batch_size: int, segment_length: int, seed: int):
        """Endless iterator of (batch, segment_length) float32 tensors, reshuffled each epoch."""
        rng = np.random.default_rng(seed)
        while True:
            order = rng.permutation(len(self.clips))
            for i in range(0, len(order), batch_size):
                idx = order[i : i + batch_size]
                if len(idx) < batch_size:
                    # short tail: wrap around the epoch's order
                    idx = np.resize(np.concatenate([idx, order]), batch_size)
                seg = np.stack([fit_segment(self.clips[j], segment_length, rng) for j in idx])
                yield torch.from_numpy(seg)


def ingest_audio(paths, segment_length: int, seed: int, sample_rate: int | None = None) -> AudioCorpus:
    """Load and validate WAV files; every offending file is listed in one error."""
    paths = [Path(p) for p in paths]
    if not paths:
        raise IngestionError("dataset is empty")
    clips, bad = [], []
    rate = sample_rate
    seen = set()
    for p in paths:
        key = p.resolve()
        if key in seen:
            bad.append(f"{p}: duplicate file")
            continue
        seen.add(key)
        try:
            x, sr = read_wav(p)
        except IngestionError as exc:
            bad.append(str(exc))
            continue
        if rate is None:
            rate = sr
        if sr != rate:
            bad.append(f"{p}: sample rate {sr} != {rate}")
            continue
        if len(x) == 0:
            bad.append(f"{p}: empty")
            continue
        clips.append(normalize(x))
    if bad:
        raise IngestionError("cannot ingest:\n  " + "\n  ".join(bad))
    corpus = AudioCorpus(clips, rate)
    corpus.seed = seed
    corpus.segment_length = segment_length
    return corpus


def synthetic_clip(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    """Harmonic tone with vibrato and a decaying envelope plus band-limited noise."""
    t = np.arange(n) / sr
    f0 = rng.uniform(90, 320)
    vib = 1 + 0.02 * np.sin(2 * np.pi * rng.uniform(3, 7) * t)
    phase = 2 * np.pi * np.cumsum(f0 * vib) / sr
    x = np.zeros(n)
    for k in range(1, int(min(20, (sr / 2 - 200) // f0)) + 1):
        x += rng.uniform(0.2, 1.0) / k * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    lo = rng.uniform(200, 2000)
    hi = min(lo * rng.uniform(1.5, 4), sr / 2 * 0.95)
    sos = scipy.signal.butter(4, [lo, hi], btype="bandpass", fs=sr, output="sos")
    noise = scipy.signal.sosfilt(sos, rng.standard_normal(n))
    x = x / (np.max(np.abs(x)) + 1e-9) + rng.uniform(0.05, 0.4) * noise / (np.std(noise) + 1e-9) * 0.3
    env = np.minimum(1.0, t / 0.05) * np.exp(-t * rng.uniform(0.0, 2.0))
    gate = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(1, 4) * t + rng.uniform(0, 2 * np.pi))
    return x * env * (0.3 + 0.7 * gate)


def synthetic_corpus(n_clips: int = 200, duration: float = 1.0, sample_rate: int = 16000, seed: int = 0) -> AudioCorpus:
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    return AudioCorpus([normalize(synthetic_clip(rng, n, sample_rate)) for _ in range(n_clips)], sample_rate)
