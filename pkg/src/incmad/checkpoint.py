"""Versioned npz checkpoints of named parameter tensors.

The archive stores one array per parameter plus a JSON manifest recording
the format version, every shape, and optional user metadata. Loading
validates the manifest against the stored arrays; applying to a model
validates names and shapes against the live parameters.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

__all__ = [
    "save_checkpoint",
    "load_checkpoint",
    "apply_state",
    "CheckpointError",
    "FORMAT_VERSION",
]

FORMAT_VERSION = 1
_MANIFEST_KEY = "__manifest__"


class CheckpointError(RuntimeError):
    """Corrupt, incompatible, or mismatched checkpoint."""


def save_checkpoint(params: dict, path: str | Path, meta: dict | None = None) -> None:
    """Writes named arrays (Tensor or ndarray values) plus a manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, p in params.items():
        arr = np.asarray(getattr(p, "data", p), dtype=np.float64)
        if name == _MANIFEST_KEY:
            raise CheckpointError(f"parameter name {name!r} is reserved")
        arrays[name] = arr
    manifest = {
        "version": FORMAT_VERSION,
        "shapes": {name: list(a.shape) for name, a in arrays.items()},
        "meta": meta or {},
    }
    arrays[_MANIFEST_KEY] = np.frombuffer(
        json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8
    )
    np.savez(path, **arrays)


def load_checkpoint(path: str | Path) -> tuple[dict, dict]:
    """Returns (name -> float64 array, meta dict); validates the manifest."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    with np.load(path) as npz:
        if _MANIFEST_KEY not in npz:
            raise CheckpointError(f"checkpoint {path} has no manifest")
        manifest = json.loads(bytes(npz[_MANIFEST_KEY]).decode())
        if manifest.get("version") != FORMAT_VERSION:
            raise CheckpointError(
                f"checkpoint {path} has format version {manifest.get('version')}, "
                f"expected {FORMAT_VERSION}"
            )
        arrays = {k: npz[k].astype(np.float64) for k in npz.files if k != _MANIFEST_KEY}
    shapes = {k: tuple(v) for k, v in manifest["shapes"].items()}
    if set(shapes) != set(arrays):
        raise CheckpointError(f"checkpoint {path}: manifest and arrays disagree")
    for name, arr in arrays.items():
        if arr.shape != shapes[name]:
            raise CheckpointError(
                f"checkpoint {path}: {name} has shape {arr.shape}, manifest says {shapes[name]}"
            )
    return arrays, manifest["meta"]


def apply_state(params: dict, state: dict) -> None:
    """Copies checkpoint arrays into live parameters by name, shape-checked."""
    missing = sorted(set(params) - set(state))
    extra = sorted(set(state) - set(params))
    if missing or extra:
        raise CheckpointError(
            f"parameter names disagree (missing: {missing or 'none'}, extra: {extra or 'none'})"
        )
    for name, p in params.items():
        if p.data.shape != state[name].shape:
            raise CheckpointError(
                f"{name}: live shape {p.data.shape} vs checkpoint {state[name].shape}"
            )
        p.data = state[name].copy()
