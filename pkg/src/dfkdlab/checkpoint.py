"""The ``PRSM`` container used for checkpoints and datasets.

Layout::

    b"PRSM" | u16 version | u32 metadata length | metadata JSON (utf-8) | blobs

All integers are little endian.  ``metadata["arrays"]`` lists ``{name, shape,
dtype}`` in blob order; blobs are raw little-endian ``<f8`` (or ``<i8``) data.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PRSM"
FORMAT_VERSION = 1
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def dumps(metadata: dict, arrays: dict[str, np.ndarray]) -> bytes:
    """Serialize ``arrays`` (in insertion order) with ``metadata``."""
    specs = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "i8" if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool else "f8"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        specs.append({"name": name, "shape": list(data.shape), "dtype": code})
        blobs.append(data.tobytes())
    meta = dict(metadata)
    meta["arrays"] = specs
    header = canonical_json(meta).encode("utf-8")
    return b"".join(
        [MAGIC, struct.pack("<H", FORMAT_VERSION), struct.pack("<I", len(header)), header, *blobs]
    )


def loads(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    (hlen,) = struct.unpack_from("<I", buf, 6)
    start = 10
    meta = json.loads(buf[start : start + hlen].decode("utf-8"))
    offset = start + hlen
    arrays = {}
    for spec in meta.get("arrays", []):
        dtype = _DTYPES[spec["dtype"]]
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(buf):
            raise CheckpointError(f"truncated blob for array {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(buf):
        raise CheckpointError(f"{len(buf) - offset} trailing bytes after last blob")
    return meta, arrays


def save(path, metadata: dict, arrays: dict[str, np.ndarray]) -> str:
    """Write a container file and return the sha256 of its bytes."""
    buf = dumps(metadata, arrays)
    Path(path).write_bytes(buf)
    return hashlib.sha256(buf).hexdigest()


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
