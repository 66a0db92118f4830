#!/usr/bin/env python3
"""
Flat binary tensor container + JSON manifest, shared by datasets and checkpoints

File layout (little-endian):
    uint64 ndim | uint64 element width (4 or 8) | ndim x uint64 dims | float data
"""

import hashlib
import json
import os
import struct
from typing import Dict

import numpy as np

from errors import FormatError

MANIFEST_NAME = "manifest.json"
_DTYPES = {4: "<f4", 8: "<f8"}


def write_tensor(path: str, array: np.ndarray, width: int = 4):
    if width not in _DTYPES:
        raise ValueError(f"element width must be 4 or 8, got {width}")
    array = np.ascontiguousarray(array, dtype=_DTYPES[width])
    with open(path, "wb") as f:
        f.write(struct.pack("<QQ", array.ndim, width))
        f.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        f.write(array.tobytes())


def read_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise FormatError("truncated tensor header", offset=len(raw), path=path)
    ndim, width = struct.unpack_from("<QQ", raw, 0)
    if width not in _DTYPES:
        raise FormatError(f"unsupported element width {width}", offset=8, path=path)
    dims_end = 16 + 8 * ndim
    if len(raw) < dims_end:
        raise FormatError("truncated tensor dims", offset=len(raw), path=path)
    shape = struct.unpack_from(f"<{ndim}Q", raw, 16)
    expected = dims_end + width * int(np.prod(shape, dtype=np.int64))
    if len(raw) != expected:
        raise FormatError(f"tensor data is {len(raw) - dims_end} bytes, expected {expected - dims_end}",
                          offset=min(len(raw), expected), path=path)
    return np.frombuffer(raw, dtype=_DTYPES[width], offset=dims_end).reshape(shape).astype(np.float64)


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_tensors(directory: str, arrays: Dict[str, np.ndarray], width: int = 4) -> Dict[str, dict]:
    """Write one .bin per array; returns the registry to embed in a manifest"""
    os.makedirs(directory, exist_ok=True)
    registry = {}
    for name, array in arrays.items():
        filename = f"{name}.bin"
        path = os.path.join(directory, filename)
        write_tensor(path, array, width)
        registry[name] = {"file": filename, "shape": list(np.shape(array)), "sha256": sha256_file(path)}
    return registry


def verify_checksums(directory: str, registry: Dict[str, dict]):
    for name, entry in registry.items():
        path = os.path.join(directory, entry["file"])
        if not os.path.exists(path):
            raise FileNotFoundError(f"tensor file missing: {path}")
        if sha256_file(path) != entry["sha256"]:
            raise FormatError(f"checksum mismatch for '{name}'", path=path)


def load_tensors(directory: str, registry: Dict[str, dict], verify: bool = True) -> Dict[str, np.ndarray]:
    if verify:
        verify_checksums(directory, registry)
    return {name: read_tensor(os.path.join(directory, entry["file"])) for name, entry in registry.items()}


def write_manifest(directory: str, payload: dict) -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_manifest(directory: str) -> dict:
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
