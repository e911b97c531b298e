"""Model checkpoint container: JSON manifest + raw little-endian arrays.

File layout (all integers little-endian):

    bytes 0..8    magic b"MLABCKPT"
    bytes 8..12   uint32 manifest length in bytes
    manifest      UTF-8 JSON: {"format_version": 1,
                               "arrays": {name: {"dtype", "shape", "offset"}},
                               "meta": {...}}
    payload       concatenated raw array bytes, in manifest order

Round trips are bit-exact: dtypes are preserved as stored.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"MLABCKPT"
FORMAT_VERSION = 1
_ALLOWED_DTYPES = {"<f4", "<f8"}


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    entries: dict[str, dict] = {}
    blobs: list[bytes] = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<").str
        if dtype not in _ALLOWED_DTYPES:
            raise DataError(f"checkpoint array {name}: unsupported dtype {arr.dtype}")
        blob = arr.astype(dtype, copy=False).tobytes(order="C")
        entries[name] = {"dtype": dtype, "shape": list(arr.shape), "offset": offset}
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps(
        {"format_version": FORMAT_VERSION, "arrays": entries, "meta": meta or {}},
        sort_keys=True,
    ).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for blob in blobs:
            f.write(blob)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    (manifest_len,) = struct.unpack("<I", raw[8:12])
    manifest = json.loads(raw[12 : 12 + manifest_len].decode("utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format_version {manifest.get('format_version')}")
    payload = raw[12 + manifest_len :]
    arrays: dict[str, np.ndarray] = {}
    for name, entry in manifest["arrays"].items():
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=start).reshape(shape)
        arrays[name] = arr.copy()
    return arrays, manifest.get("meta", {})
