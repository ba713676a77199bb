"""On-disk array container and checkpoint directories.

Each array is stored as raw little-endian float64 bytes (``<name>.f64``)
next to a JSON sidecar ``<name>.json`` holding ``{"shape": [...], "name":
"..."}``. A checkpoint is a directory of such pairs plus ``manifest.json``
listing parameter names in load order, a ``kind`` tag, and free-form
``extra`` metadata (model configs, step counters, RNG state).
"""

from __future__ import annotations

import hashlib
import json
import os
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

MANIFEST_NAME = "manifest.json"


class CheckpointError(RuntimeError):
    """Raised on malformed or mismatching checkpoint contents."""


def _fname(name: str) -> str:
    safe = name.replace(os.sep, "__")
    return safe


def save_array(dirpath: str, name: str, arr: np.ndarray) -> None:
    os.makedirs(dirpath, exist_ok=True)
    base = os.path.join(dirpath, _fname(name))
    data = np.ascontiguousarray(arr, dtype="<f8")
    with open(base + ".f64", "wb") as fh:
        fh.write(data.tobytes())
    with open(base + ".json", "w") as fh:
        json.dump({"shape": list(arr.shape), "name": name}, fh)


def load_array(dirpath: str, name: str) -> np.ndarray:
    base = os.path.join(dirpath, _fname(name))
    try:
        with open(base + ".json") as fh:
            side = json.load(fh)
    except FileNotFoundError:
        raise CheckpointError(f"missing array sidecar for '{name}' in {dirpath}")
    shape = tuple(int(s) for s in side["shape"])
    raw = np.fromfile(base + ".f64", dtype="<f8")
    if raw.size != int(np.prod(shape, dtype=np.int64)) if shape else raw.size != 1:
        raise CheckpointError(f"array '{name}': payload has {raw.size} values, sidecar shape {shape}")
    return raw.reshape(shape).astype(np.float64)


def save_checkpoint(dirpath: str, kind: str, arrays: Dict[str, np.ndarray], extra: Optional[dict] = None) -> None:
    os.makedirs(dirpath, exist_ok=True)
    names = list(arrays.keys())
    for name in names:
        save_array(dirpath, name, arrays[name])
    manifest = {"kind": kind, "names": names, "extra": extra or {}}
    with open(os.path.join(dirpath, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def read_manifest(dirpath: str) -> dict:
    path = os.path.join(dirpath, MANIFEST_NAME)
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CheckpointError(f"no {MANIFEST_NAME} in {dirpath}")


def load_checkpoint(dirpath: str, expect_kind: Optional[str] = None) -> Tuple[Dict[str, np.ndarray], dict]:
    manifest = read_manifest(dirpath)
    if expect_kind is not None and manifest.get("kind") != expect_kind:
        raise CheckpointError(
            f"checkpoint kind mismatch in {dirpath}: found '{manifest.get('kind')}', expected '{expect_kind}'"
        )
    arrays = {name: load_array(dirpath, name) for name in manifest["names"]}
    return arrays, manifest


def checkpoint_digest(dirpath: str) -> str:
    """SHA-256 over the manifest and every payload, in manifest order."""
    manifest = read_manifest(dirpath)
    hasher = hashlib.sha256()
    hasher.update(json.dumps(manifest, sort_keys=True).encode())
    for name in manifest["names"]:
        with open(os.path.join(dirpath, _fname(name)) + ".f64", "rb") as fh:
            hasher.update(fh.read())
    return hasher.hexdigest()


def assign_arrays(params: Dict[str, "np.ndarray"], arrays: Dict[str, np.ndarray],
                  allow_missing: bool = False) -> Tuple[List[str], List[str]]:
    """Copy stored arrays into live parameter storage by name.

    Returns (loaded, missing) name lists; shape mismatches raise and name
    the parameter.
    """
    loaded, missing = [], []
    for name, dest in params.items():
        src = arrays.get(name)
        if src is None:
            if not allow_missing:
                raise CheckpointError(f"checkpoint is missing parameter '{name}'")
            missing.append(name)
            continue
        if src.shape != dest.shape:
            raise CheckpointError(f"parameter '{name}': stored shape {src.shape} != model shape {dest.shape}")
        dest[...] = src
        loaded.append(name)
    return loaded, missing
