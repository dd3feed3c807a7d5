"""Portable checkpoint container shared by every trained component.

A checkpoint is a single ``.npz`` file: one array per parameter plus a
``__manifest__`` entry holding a JSON document (kind, config, seed, ...).
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np
import torch

MANIFEST_KEY = "__manifest__"


def state_checksum(state: dict) -> str:
    """SHA-256 over parameter names, shapes and raw bytes, in sorted-name order."""
    h = hashlib.sha256()
    for name in sorted(state):
        value = state[name]
        arr = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
        arr = np.ascontiguousarray(arr)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(str(arr.dtype).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def module_checksum(module: torch.nn.Module) -> str:
    return state_checksum(module.state_dict())


def save_checkpoint(path: str, state: dict, manifest: dict) -> None:
    arrays = {name: value.detach().cpu().numpy() for name, value in state.items()}
    if MANIFEST_KEY in arrays:
        raise ValueError(f"parameter name {MANIFEST_KEY!r} is reserved")
    manifest = dict(manifest, checksum=state_checksum(state))
    arrays[MANIFEST_KEY] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp.npz"
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict, dict]:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with np.load(path) as data:
        manifest = json.loads(bytes(data[MANIFEST_KEY]).decode())
        state = {k: torch.from_numpy(data[k].copy()) for k in data.files if k != MANIFEST_KEY}
    return state, manifest


def read_manifest(path: str) -> dict:
    return load_checkpoint(path)[1]


def update_manifest(path: str, **updates) -> dict:
    state, manifest = load_checkpoint(path)
    manifest.update(updates)
    manifest.pop("checksum", None)
    save_checkpoint(path, state, manifest)
    return manifest


def derive_seed(*keys: int) -> int:
    """Counter-based seed splitting: independent of evaluation order."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])
