"""Portable checkpoint directories.

Layout::

    <dir>/manifest.json   entries (name, shape, dtype, offset, nbytes) and metadata
    <dir>/tensors.bin     little-endian float32 blobs, row-major, back to back

Writes go to a sibling temp directory which is renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np
import torch

from ..errors import ConfigurationError, IngestionError, StructuralError

MANIFEST = "manifest.json"
BLOBS = "tensors.bin"
FORMAT_VERSION = 1
KINDS = ("base", "adapter", "instance")


def _to_le_f32(t: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(t.detach().cpu().to(torch.float32).numpy(), dtype="<f4")


def check_metadata(metadata: dict):
    kind = metadata.get("kind")
    if kind not in KINDS:
        raise StructuralError(f"checkpoint kind must be one of {KINDS}, got {kind!r}")
    wm = metadata.get("watermark")
    if kind == "instance" and not wm:
        raise StructuralError("merged instances must carry a watermark bit string")
    if kind == "adapter" and wm:
        raise StructuralError("adapter checkpoints must not carry a watermark")
    if wm and any(c not in "01" for c in wm):
        raise StructuralError(f"malformed watermark {wm!r} in metadata")


def save_checkpoint(path, tensors: dict, metadata: dict, force: bool = False) -> str:
    """Write tensors + metadata atomically; returns the checkpoint hash."""
    path = Path(path)
    check_metadata(metadata)
    if path.exists() and not force:
        raise ConfigurationError(f"{path} exists; pass force=True / --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        entries = []
        offset = 0
        with open(tmp / BLOBS, "wb") as fh:
            for name in sorted(tensors):
                arr = _to_le_f32(tensors[name])
                raw = arr.tobytes(order="C")
                fh.write(raw)
                entries.append(
                    {"name": name, "shape": list(arr.shape), "dtype": "<f4", "offset": offset, "nbytes": len(raw)}
                )
                offset += len(raw)
        manifest = {"format": FORMAT_VERSION, "tensors": entries, "metadata": metadata}
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return checkpoint_hash(path)


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read checkpoint manifest in {path}: {exc}") from exc
    names = [e["name"] for e in manifest.get("tensors", [])]
    if len(names) != len(set(names)):
        raise StructuralError(f"duplicate tensor names in {path}")
    return manifest


def load_checkpoint(path):
    """(tensors: name -> float32 tensor, metadata)."""
    path = Path(path)
    manifest = read_manifest(path)
    try:
        raw = (path / BLOBS).read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read tensor blobs in {path}: {exc}") from exc
    tensors = {}
    for e in manifest["tensors"]:
        if e["dtype"] != "<f4":
            raise StructuralError(f"unsupported dtype {e['dtype']} for {e['name']}")
        chunk = raw[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise StructuralError(f"truncated blob for {e['name']}")
        arr = np.frombuffer(chunk, dtype="<f4").reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return tensors, manifest["metadata"]


def tensor_bytes(path, name: str) -> bytes:
    manifest = read_manifest(path)
    for e in manifest["tensors"]:
        if e["name"] == name:
            with open(Path(path) / BLOBS, "rb") as fh:
                fh.seek(e["offset"])
                return fh.read(e["nbytes"])
    raise KeyError(name)


def checkpoint_hash(path) -> str:
    h = hashlib.sha256()
    path = Path(path)
    h.update((path / MANIFEST).read_bytes())
    h.update((path / BLOBS).read_bytes())
    return h.hexdigest()[:16]


def state_hash(tensors: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(_to_le_f32(tensors[name]).tobytes())
    return h.hexdigest()[:16]


def prefixed(prefix: str, state: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in state.items()}


def unprefixed(prefix: str, tensors: dict) -> dict:
    p = prefix + "."
    return {k[len(p) :]: v for k, v in tensors.items() if k.startswith(p)}
