"""
Binary tensor container used for checkpoints, embedding twins and patch stacks.

Layout:
    magic            4 bytes ("CDL1", "EMB1", "PCH1")
    manifest_length  little-endian uint32
    manifest         UTF-8 JSON: {"arrays": [{"name", "dtype", "shape", "offset", "nbytes"}], "meta": {...}}
    payload          little-endian array bytes, offsets relative to the payload start
"""
import json
import struct
from pathlib import Path

import numpy as np

from histoage.utils.errors import DataError, MissingArtifactError


def write_container(path, magic: bytes, arrays: dict, meta: dict | None = None) -> Path:
    if len(magic) != 4:
        raise ValueError(f"container magic must be 4 bytes, got {magic!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    entries = []
    blobs = []
    offset = 0
    for name, array in arrays.items():
        array = np.ascontiguousarray(array)
        little = array.astype(array.dtype.newbyteorder("<"), copy=False)
        blob = little.tobytes()
        entries.append({
            "name": name,
            "dtype": little.dtype.str,
            "shape": list(array.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)

    manifest = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for blob in blobs:
            f.write(blob)
    return path


def read_container(path, magic: bytes) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path)
    raw = path.read_bytes()
    if raw[:4] != magic:
        raise DataError(f"{path}: expected magic {magic!r}, found {raw[:4]!r}")
    (length,) = struct.unpack("<I", raw[4:8])
    manifest = json.loads(raw[8:8 + length].decode("utf-8"))
    payload = memoryview(raw)[8 + length:]

    arrays = {}
    for entry in manifest["arrays"]:
        start = entry["offset"]
        chunk = payload[start:start + entry["nbytes"]]
        arr = np.frombuffer(chunk, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return arrays, manifest.get("meta", {})
