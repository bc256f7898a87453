"""Signal-level attacks applied to generated audio before watermark extraction.

Every attack is a pure function of ``(wave, sr, spec)``. Stochastic kinds draw
from a generator seeded by ``spec.seed``. The codec round trips shell out to an
ffmpeg binary and report :class:`SkippedAttack` when none can be found.
"""

from __future__ import annotations

import csv
import math
import os
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .errors import DomainError, SkippedAttack

FFMPEG_ENV = "P2MARK_FFMPEG"
FILTER_ORDER = 5
RESAMPLE_TARGET = 44100

KINDS = (
    "pink_noise",
    "white_noise",
    "lowpass",
    "bandpass",
    "highpass",
    "boost",
    "duck",
    "mp3",
    "aac",
    "resample",
    "echo",
    "crop",
)

DEFAULT_PARAMS = {
    "pink_noise": {"std": 0.1},
    "white_noise": {"std": 0.05},
    "lowpass": {"cutoff": 500.0},
    "bandpass": {"low": 500.0, "high": 1500.0},
    "highpass": {"cutoff": 1500.0},
    "boost": {"factor": 10.0},
    "duck": {"factor": 0.1},
    "mp3": {"bitrate": "128k"},
    "aac": {"bitrate": "128k"},
    "resample": {"rates": (RESAMPLE_TARGET,)},
    "echo": {"delay": 0.5, "decay": 0.5},
    "crop": {"fraction": 0.5},
}

# (row label, kind, params override); "None" is the identity row
BATTERY = (
    ("None", None, {}),
    ("pink_noise", "pink_noise", {}),
    ("white_noise", "white_noise", {}),
    ("lowpass", "lowpass", {}),
    ("bandpass", "bandpass", {}),
    ("highpass", "highpass", {}),
    ("boost", "boost", {}),
    ("duck", "duck", {}),
    ("mp3", "mp3", {}),
    ("aac", "aac", {}),
    ("resample", "resample", {}),
    ("echo", "echo", {}),
    ("crop", "crop", {}),
    # the literal 24 kHz -> 44.1 kHz chain, entered from and returned to the working rate
    ("resample_24k", "resample", {"rates": (24000, RESAMPLE_TARGET)}),
)


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown attack kind {self.kind!r}; choose from {', '.join(KINDS)}")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.kind])
        if unknown:
            raise DomainError(f"{self.kind} does not take {sorted(unknown)}")

    def resolved(self) -> dict:
        return {**DEFAULT_PARAMS[self.kind], **self.params}

    def validate(self, sr: int):
        p = self.resolved()
        nyq = sr / 2
        k = self.kind
        if k in ("pink_noise", "white_noise") and not p["std"] >= 0:
            raise DomainError(f"{k}: std must be >= 0, got {p['std']}")
        if k in ("lowpass", "highpass") and not 0 < p["cutoff"] < nyq:
            raise DomainError(f"{k}: cutoff must lie in (0, {nyq}), got {p['cutoff']}")
        if k == "bandpass" and not 0 < p["low"] < p["high"] < nyq:
            raise DomainError(f"bandpass: need 0 < low < high < {nyq}, got {p['low']}..{p['high']}")
        if k in ("boost", "duck") and not p["factor"] > 0:
            raise DomainError(f"{k}: factor must be > 0, got {p['factor']}")
        if k == "echo" and (not p["delay"] >= 0 or not p["decay"] >= 0):
            raise DomainError(f"echo: delay and decay must be >= 0, got {p['delay']}, {p['decay']}")
        if k == "resample" and (not p["rates"] or any(not r > 0 or int(r) != r for r in p["rates"])):
            raise DomainError(f"resample: rates must be positive integers, got {p['rates']}")
        if k == "crop" and not 0 < p["fraction"] <= 1:
            raise DomainError(f"crop: fraction must lie in (0, 1], got {p['fraction']}")
        return p

    def describe(self) -> str:
        def fmt(v):
            return "/".join(str(int(r)) for r in v) if isinstance(v, (tuple, list)) else str(v)

        return ";".join(f"{k}={fmt(v)}" for k, v in sorted(self.resolved().items()))


# --- individual attacks ----------------------------------------------------------


def white_noise(n: int, std: float, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, std, n)


def pink_noise(n: int, std: float, rng: np.random.Generator) -> np.ndarray:
    """White noise shaped by 1/sqrt(f) in the frequency domain, renormalised to ``std``."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(len(spec), dtype=np.float64)
    f[0] = 1.0
    spec /= np.sqrt(f)
    spec[0] = 0.0
    x = np.fft.irfft(spec, n)
    sd = x.std()
    return x * (std / sd) if sd > 0 else x


def butter_filter(x: np.ndarray, sr: int, btype: str, cutoff) -> np.ndarray:
    b, a = scipy.signal.butter(FILTER_ORDER, cutoff, btype=btype, fs=sr)
    return scipy.signal.lfilter(b, a, x)


def echo(x: np.ndarray, sr: int, delay: float, decay: float) -> np.ndarray:
    d = int(round(delay * sr))
    y = x.copy()
    if 0 < d < len(x):
        y[d:] += decay * x[: len(x) - d]
    elif d == 0:
        y = x * (1.0 + decay)
    return y


def _resample(x: np.ndarray, src: int, dst: int) -> np.ndarray:
    g = math.gcd(int(src), int(dst))
    return scipy.signal.resample_poly(x, dst // g, src // g)


def resample_roundtrip(x: np.ndarray, sr: int, rates) -> np.ndarray:
    """sr -> rates[0] -> ... -> rates[-1] -> sr with polyphase filtering."""
    cur = int(sr)
    for r in list(rates) + [int(sr)]:
        x = _resample(x, cur, int(r))
        cur = int(r)
    return x


def find_ffmpeg() -> str | None:
    """ffmpeg binary from $P2MARK_FFMPEG, the PATH, or the imageio-ffmpeg wheel."""
    env = os.environ.get(FFMPEG_ENV)
    if env:
        return env if Path(env).exists() else None
    exe = shutil.which("ffmpeg")
    if exe:
        return exe
    try:
        import imageio_ffmpeg
    except ImportError:
        return None
    try:
        return imageio_ffmpeg.get_ffmpeg_exe()
    except RuntimeError:
        return None


_CODECS = {"mp3": ("libmp3lame", "mp3"), "aac": ("aac", "m4a")}


def codec_roundtrip(x: np.ndarray, sr: int, kind: str, bitrate: str) -> np.ndarray:
    exe = find_ffmpeg()
    if exe is None:
        raise SkippedAttack(f"{kind}: no ffmpeg found (set {FFMPEG_ENV})")
    encoder, ext = _CODECS[kind]
    with tempfile.TemporaryDirectory(prefix="p2mark-codec-") as tmp:
        src = Path(tmp) / "in.wav"
        enc = Path(tmp) / f"enc.{ext}"
        dst = Path(tmp) / "out.wav"
        scipy.io.wavfile.write(src, sr, x.astype(np.float32))
        base = [exe, "-nostdin", "-hide_banner", "-loglevel", "error", "-y"]
        try:
            subprocess.run(
                base + ["-i", str(src), "-c:a", encoder, "-b:a", bitrate, str(enc)],
                check=True, capture_output=True,
            )
            subprocess.run(
                base + ["-i", str(enc), "-ar", str(sr), "-ac", "1", "-c:a", "pcm_f32le", str(dst)],
                check=True, capture_output=True,
            )
        except (OSError, subprocess.CalledProcessError) as exc:
            detail = getattr(exc, "stderr", b"") or b""
            raise SkippedAttack(f"{kind}: ffmpeg failed: {detail.decode(errors='replace').strip() or exc}")
        _, y = scipy.io.wavfile.read(dst)
    y = np.asarray(y, dtype=np.float64)
    # encoders add priming delay and frame padding; keep the timeline length of the input
    if len(y) >= len(x):
        return y[: len(x)]
    return np.pad(y, (0, len(x) - len(y)))


def apply_attack(wave, sr: int, spec: AttackSpec) -> np.ndarray:
    """Attacked copy of a 1-D float waveform. Output dtype follows the input."""
    x = np.asarray(wave)
    if x.ndim != 1 or x.size == 0:
        raise DomainError(f"expected a non-empty 1-D waveform, got shape {x.shape}")
    if not sr > 0:
        raise DomainError(f"sample rate must be positive, got {sr}")
    p = spec.validate(sr)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    xf = x.astype(np.float64)
    rng = np.random.default_rng(spec.seed)
    k = spec.kind
    if k == "white_noise":
        y = xf + white_noise(len(xf), p["std"], rng)
    elif k == "pink_noise":
        y = xf + pink_noise(len(xf), p["std"], rng)
    elif k == "lowpass":
        y = butter_filter(xf, sr, "lowpass", p["cutoff"])
    elif k == "highpass":
        y = butter_filter(xf, sr, "highpass", p["cutoff"])
    elif k == "bandpass":
        y = butter_filter(xf, sr, "bandpass", [p["low"], p["high"]])
    elif k in ("boost", "duck"):
        # scaling in the input precision keeps boost followed by duck exact up to rounding
        return (x * dtype.type(p["factor"]) if np.issubdtype(x.dtype, np.floating) else xf * p["factor"])
    elif k in ("mp3", "aac"):
        y = codec_roundtrip(xf, sr, k, p["bitrate"])
    elif k == "resample":
        y = resample_roundtrip(xf, sr, p["rates"])
    elif k == "echo":
        y = echo(xf, sr, p["delay"], p["decay"])
    elif k == "crop":
        y = xf[: math.ceil(len(xf) * p["fraction"])]
    else:  # pragma: no cover - guarded by AttackSpec
        raise DomainError(k)
    return y.astype(dtype)


# --- battery -----------------------------------------------------------------------


@dataclass
class AttackResult:
    name: str
    kind: str | None
    params: str
    wave: np.ndarray | None
    skipped: bool = False
    reason: str = ""


def battery_specs(seed: int = 0):
    """(row label, AttackSpec or None) for every battery row."""
    return [(name, AttackSpec(kind, params, seed) if kind else None) for name, kind, params in BATTERY]


def attack_battery(wave, sr: int, seed: int = 0, names=None) -> list[AttackResult]:
    """Each battery attack applied independently to the clean input.

    Rows whose codec is unavailable are kept with ``skipped=True`` and no wave.
    ``names`` restricts the battery to a subset of row labels, order preserved.
    """
    x = np.asarray(wave)
    rows = battery_specs(seed)
    if names is not None:
        known = {n for n, _ in rows}
        missing = [n for n in names if n not in known]
        if missing:
            raise DomainError(f"unknown battery rows {missing}; choose from {sorted(known)}")
        rows = [(n, s) for n, s in rows if n in set(names)]
    out = []
    for name, spec in rows:
        if spec is None:
            out.append(AttackResult(name, None, "", x))
            continue
        try:
            out.append(AttackResult(name, spec.kind, spec.describe(), apply_attack(x, sr, spec)))
        except SkippedAttack as exc:
            out.append(AttackResult(name, spec.kind, spec.describe(), None, True, str(exc)))
    return out


REPORT_COLUMNS = ("attack", "params", "acc", "skipped")


def write_attack_report(path, rows):
    """CSV with one line per battery row; ``rows`` are dicts keyed by REPORT_COLUMNS."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            acc = row.get("acc")
            writer.writerow({**row, "acc": "" if acc is None else f"{acc:.6f}", "skipped": int(bool(row.get("skipped")))})
    tmp.replace(path)
