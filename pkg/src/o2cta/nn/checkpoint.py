"""Checkpoints: JSON manifest plus a raw little-endian float64 weight blob."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import IncompatibleCheckpoint

FORMAT = "o2cta-checkpoint/1"


def save_checkpoint(stem, named_params, meta):
    """Write ``<stem>.json`` and ``<stem>.f64``; returns the manifest path."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    layout, blobs, offset = [], [], 0
    for name, arr in named_params:
        arr = np.array(arr, dtype="<f8", order="C")
        layout.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        blobs.append(arr.tobytes())
    manifest = {
        "format": FORMAT,
        "dtype": "float64",
        "byteorder": "little",
        "weights_file": stem.name + ".f64",
        "params": layout,
        **meta,
    }
    manifest_path = stem.with_name(stem.name + ".json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    stem.with_name(stem.name + ".f64").write_bytes(b"".join(blobs))
    return manifest_path


def load_checkpoint(manifest_path):
    """Return ``(manifest, {name: array})``."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise IncompatibleCheckpoint(f"{manifest_path}: unknown checkpoint format {manifest.get('format')!r}")
    flat = np.frombuffer((manifest_path.parent / manifest["weights_file"]).read_bytes(), dtype="<f8")
    params = {}
    for entry in manifest["params"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = flat[entry["offset"]:entry["offset"] + size]
        if chunk.size != size:
            raise IncompatibleCheckpoint(f"{manifest_path}: weight blob too short for {entry['name']}")
        params[entry["name"]] = chunk.reshape(tuple(entry["shape"])).astype(np.float64)
    return manifest, params
