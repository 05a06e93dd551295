"""Checkpoint directory format.

``manifest.json`` lists every parameter (name, shape, precision, blob file)
together with the seed, step and any caller metadata.  Each parameter is
stored as raw little-endian values in its own ``.bin`` file.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _blob_name(i: int, name: str) -> str:
    return f"{i:04d}_{re.sub(r'[^A-Za-z0-9_.-]', '_', name)}.bin"


def save_checkpoint(path, state: dict[str, np.ndarray], seed: int | None = None, step: int = 0,
                    meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, value) in enumerate(state.items()):
        value = np.asarray(value)
        precision = str(value.dtype)
        if precision not in _DTYPES:
            raise ValueError(f"unsupported precision {precision} for {name}")
        blob = _blob_name(i, name)
        (path / blob).write_bytes(value.astype(_DTYPES[precision]).tobytes(order="C"))
        entries.append({"name": name, "shape": list(value.shape), "precision": precision, "file": blob})
    manifest = {"parameters": entries, "seed": seed, "step": step, "meta": meta or {}}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(state, manifest)``; arrays come back in their stored precision."""
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text())
    state = {}
    for entry in manifest["parameters"]:
        raw = np.frombuffer((path / entry["file"]).read_bytes(), dtype=_DTYPES[entry["precision"]])
        state[entry["name"]] = raw.astype(entry["precision"]).reshape(entry["shape"])
    return state, manifest
