"""Checkpoint directory format "hipo-ckpt-1".

A checkpoint is a directory holding `manifest.json` (format version, model
config, per-tensor name/shape/dtype/byte_offset) and `params.bin`
(little-endian IEEE-754 float32, tensors concatenated in manifest order).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams

FORMAT_VERSION = "hipo-ckpt-1"


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointManifestError(CheckpointError):
    """manifest.json missing or unparseable."""


class CheckpointVersionError(CheckpointError):
    """Format-version string does not match."""


class CheckpointShapeError(CheckpointError):
    """Tensor shape/offset bookkeeping is inconsistent."""


class CheckpointTruncatedError(CheckpointError):
    """params.bin is shorter than the manifest promises."""


def save_checkpoint(params: ModelParams, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = []
    blobs = []
    offset = 0
    for name, arr in params.tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append(
            {"name": name, "shape": list(arr.shape), "dtype": "f32", "byte_offset": offset}
        )
        blobs.append(data)
        offset += len(data)
    manifest = {
        "format": FORMAT_VERSION,
        "config": asdict(params.config),
        "tensors": tensors,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    (path / "params.bin").write_bytes(b"".join(blobs))
    return path


def load_checkpoint(path: str | Path) -> ModelParams:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointManifestError(f"cannot read manifest: {e}") from e
    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"expected format {FORMAT_VERSION!r}, got {manifest.get('format')!r}"
        )
    try:
        cfg = ModelConfig(**manifest["config"])
        entries = manifest["tensors"]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointManifestError(f"bad manifest contents: {e}") from e

    blob = (path / "params.bin").read_bytes()
    tensors: dict[str, np.ndarray] = {}
    for entry in entries:
        if entry.get("dtype") != "f32":
            raise CheckpointShapeError(f"tensor {entry.get('name')!r} has dtype != f32")
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 4
        start = entry["byte_offset"]
        end = start + nbytes
        if end > len(blob):
            raise CheckpointTruncatedError(
                f"params.bin has {len(blob)} bytes, tensor {entry['name']!r} needs {end}"
            )
        arr = np.frombuffer(blob[start:end], dtype="<f4")
        if arr.size != int(np.prod(shape)):
            raise CheckpointShapeError(f"tensor {entry['name']!r} size mismatch")
        tensors[entry["name"]] = arr.reshape(shape).copy()
    if sum(len(v.tobytes()) for v in tensors.values()) != len(blob):
        raise CheckpointShapeError("params.bin length does not match manifest total")
    return ModelParams(cfg, tensors)


def checkpoint_checksum(path: str | Path) -> str:
    """SHA-256 over manifest.json and params.bin."""
    path = Path(path)
    h = hashlib.sha256()
    h.update((path / "manifest.json").read_bytes())
    h.update((path / "params.bin").read_bytes())
    return h.hexdigest()
