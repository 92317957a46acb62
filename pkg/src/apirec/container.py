"""Self-describing tensor container for model and index files.

Layout: a magic line, one JSON header line (format version, a ``kind``
tag, free-form ``meta``, and a tensor manifest), then the raw
little-endian tensor bytes in manifest order. Writing the same tensors
and meta twice produces byte-identical files, which keeps artifact
hashing meaningful.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import DataError
from .util import sha256_bytes

MAGIC = b"#apirec-container v1\n"


def save_container(path, kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    manifest = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        data = arr.tobytes()
        manifest.append({"name": name, "dtype": str(arr.dtype),
                         "shape": list(arr.shape), "nbytes": len(data)})
        blobs.append(data)
    header = json.dumps({"kind": kind, "meta": meta, "tensors": manifest},
                        ensure_ascii=False, sort_keys=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(header.encode("utf-8") + b"\n")
        for blob in blobs:
            f.write(blob)


def load_container(path, expect_kind: str | None = None):
    """Read a container; returns (kind, meta, tensors)."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise DataError(f"{path}: not an apirec container file")
        header = json.loads(f.readline().decode("utf-8"))
        tensors: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            data = f.read(entry["nbytes"])
            if len(data) != entry["nbytes"]:
                raise DataError(f"{path}: truncated tensor {entry['name']!r}")
            arr = np.frombuffer(data, dtype=np.dtype(entry["dtype"]))
            tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    kind = header["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise DataError(f"{path}: expected a {expect_kind!r} container, found {kind!r}")
    return kind, header["meta"], tensors


def tensors_hash(meta: dict, tensors: dict[str, np.ndarray]) -> str:
    """Stable hash over meta plus tensor contents (for index staleness checks)."""
    h_parts = [json.dumps(meta, ensure_ascii=False, sort_keys=True).encode("utf-8")]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        h_parts.append(name.encode("utf-8"))
        h_parts.append(str(arr.dtype).encode("utf-8"))
        h_parts.append(arr.tobytes())
    return sha256_bytes(b"\x00".join(h_parts))
