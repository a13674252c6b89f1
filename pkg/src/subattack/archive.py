"""Single-file binary tensor archive: raw little-endian buffers + JSON manifest.

Layout: 8-byte magic, 4-byte LE manifest length, UTF-8 JSON manifest,
concatenated raw tensor bytes. The manifest records name/dtype/shape/offset
per tensor plus a free-form ``meta`` dict. Writing is byte-deterministic for
equal inputs (tensors sorted by name, manifest keys sorted), so checkpoint
files can be compared by hash.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TNSARCH1"

# dtype tag -> little-endian numpy dtype
_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
    "int32": "<i4",
    "uint8": "|u1",
    "bool": "|b1",
}
_TAG_BY_KIND = {np.dtype(v): k for k, v in _DTYPES.items()}


def _dtype_tag(arr: np.ndarray) -> str:
    canonical = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    tag = _TAG_BY_KIND.get(np.dtype(canonical))
    if tag is None:
        raise ValueError(f"unsupported dtype for archive: {arr.dtype}")
    return tag


def save_archive(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write ``tensors`` and ``meta`` to ``path``; returns the path written."""
    path = Path(path)
    entries = []
    buffers = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        shape = list(arr.shape)  # before ascontiguousarray, which promotes 0-dim to (1,)
        arr = np.ascontiguousarray(arr)
        tag = _dtype_tag(arr)
        raw = arr.astype(_DTYPES[tag], copy=False).tobytes()
        entries.append(
            {"name": name, "dtype": tag, "shape": shape, "offset": offset, "nbytes": len(raw)}
        )
        buffers.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"tensors": entries, "meta": meta or {}}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for raw in buffers:
            fh.write(raw)
    return path


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read an archive; returns (tensors, meta)."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a tensor archive (bad magic)")
        (mlen,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        body = fh.read()
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        raw = body[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()  # writable, detached from the file buffer
    return tensors, manifest.get("meta", {})
