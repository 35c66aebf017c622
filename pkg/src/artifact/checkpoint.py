"""Checkpoint files: a JSON manifest plus one flat little-endian float64 blob.

The manifest lists tensors in order with their shapes and byte offsets into
the blob.  Writes go to a temporary name first and are renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np


class CheckpointError(ValueError):
    pass


def _paths(path: Path) -> tuple[Path, Path]:
    path = Path(path)
    return path.with_suffix(".json"), path.with_suffix(".bin")


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save_checkpoint(path: Path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> str:
    """Write ``tensors`` in insertion order; returns the blob's sha256."""
    manifest_path, blob_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f8")
        raw = data.tobytes()
        entries.append({"name": name, "shape": list(data.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    digest = hashlib.sha256(blob).hexdigest()
    manifest = {
        "format": "f8-le",
        "tensors": entries,
        "sha256": digest,
        "meta": dict(meta or {}),
    }
    _atomic_write(blob_path, blob)
    _atomic_write(manifest_path, json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8"))
    return digest


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    manifest_path, blob_path = _paths(path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        entries = manifest["tensors"]
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest {manifest_path}: {exc}") from exc
    try:
        blob = blob_path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint blob {blob_path}: {exc}") from exc
    if hashlib.sha256(blob).hexdigest() != manifest.get("sha256"):
        raise CheckpointError(f"checkpoint blob {blob_path} does not match its manifest checksum")
    out: dict[str, np.ndarray] = {}
    for e in entries:
        a, n = int(e["offset"]), int(e["nbytes"])
        if a + n > len(blob):
            raise CheckpointError(f"checkpoint blob {blob_path} truncated at tensor {e['name']}")
        out[e["name"]] = np.frombuffer(blob[a:a + n], dtype="<f8").astype(np.float64).reshape(e["shape"])
    return out, manifest.get("meta", {})


def checkpoint_digest(path: Path) -> str:
    manifest_path, _ = _paths(path)
    return json.loads(manifest_path.read_text(encoding="utf-8"))["sha256"]
