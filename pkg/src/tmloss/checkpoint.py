"""Checkpoint container: a zip archive of raw little-endian float32 arrays.

Layout::

    manifest.json          {"format", "byte_order", "precision", "tensors": [...], "meta": {...}}
    tensors/<name>.f32     raw '<f4' bytes, C order, one file per named array

The archive is written with fixed timestamps and no compression so equal
contents give byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from pathlib import Path
from typing import Any

import numpy as np

from tmloss.errors import IntegrityError

FORMAT = "tmloss-checkpoint/1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(path, state: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = []
    blobs = []
    for name, value in state.items():
        arr = np.ascontiguousarray(np.asarray(value), dtype="<f4")
        file = f"tensors/{name}.f32"
        tensors.append({"name": name, "shape": list(arr.shape), "file": file})
        blobs.append((file, arr.tobytes()))
    manifest = {"format": FORMAT, "byte_order": "little", "precision": "float32",
                "tensors": tensors, "meta": meta or {}}
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        zf.writestr(_entry("manifest.json"), json.dumps(manifest, indent=2, sort_keys=True))
        for file, blob in blobs:
            zf.writestr(_entry(file), blob)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format") != FORMAT or manifest.get("byte_order") != "little":
                raise IntegrityError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
            state = {}
            for entry in manifest["tensors"]:
                raw = zf.read(entry["file"])
                shape = tuple(entry["shape"])
                if len(raw) != 4 * int(np.prod(shape, dtype=np.int64)):
                    raise IntegrityError(f"{path}: {entry['name']} holds {len(raw)} bytes for shape {shape}")
                state[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt checkpoint ({exc})") from exc
    return state, manifest["meta"]


def state_hash(state: dict[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and float32 contents (metadata excluded)."""
    h = hashlib.sha256()
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def parameter_hash(path) -> str:
    return state_hash(load_checkpoint(path)[0])


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
