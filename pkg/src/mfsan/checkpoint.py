"""Self-describing binary checkpoint container.

Layout: the ASCII header line ``MFSAN-CKPT-1\n``, an 8-byte little-endian
unsigned length, a UTF-8 JSON block of that length, then the raw array data.
The JSON block holds arbitrary metadata under ``meta`` plus an ``arrays``
index listing each buffer's name and shape in file order.  Buffers are
float64, little-endian, C-order, written back to back.  Readers load the
whole file before constructing anything, so truncated or corrupt files
never produce a partial result.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"MFSAN-CKPT-1\n"


def write_container(path, meta: dict, arrays: dict) -> None:
    """Write ``meta`` and named float64 arrays to ``path`` atomically enough."""
    index = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    payload = json.dumps({"meta": meta, "arrays": index}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def read_container(path) -> tuple[dict, dict]:
    """Read back (meta, arrays); any structural defect raises CheckpointError."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no such checkpoint") from None
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad or unsupported header "
                              f"(expected {MAGIC!r})")
    offset = len(MAGIC)
    if len(raw) < offset + 8:
        raise CheckpointError(f"{path}: truncated before the index")
    (payload_len,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    if len(raw) < offset + payload_len:
        raise CheckpointError(f"{path}: truncated JSON block")
    try:
        payload = json.loads(raw[offset:offset + payload_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt JSON block ({exc})") from None
    offset += payload_len
    if not isinstance(payload, dict) or "meta" not in payload or "arrays" not in payload:
        raise CheckpointError(f"{path}: JSON block missing meta/arrays")
    arrays = {}
    for entry in payload["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if len(raw) < offset + nbytes:
            raise CheckpointError(f"{path}: truncated array data for {entry['name']!r}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return payload["meta"], arrays
