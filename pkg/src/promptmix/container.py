"""Binary container shared by model, prompt-store, connector and classifier files.

Layout::

    8 bytes   magic  b"PMIXCKPT"
    8 bytes   header length N, unsigned little-endian
    N bytes   UTF-8 JSON header:
                {"kind": str, "meta": {...},
                 "arrays": [{"name", "dtype", "shape", "offset", "nbytes"}, ...],
                 "digest": sha256 hex of the data section}
    ...       data section: arrays back to back, little-endian, row-major

Offsets in the header are relative to the start of the data section.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PMIXCKPT"
_DTYPES = {"f8": "<f8", "i8": "<i8"}


class ContainerError(ValueError):
    """Malformed container; message carries the byte offset of the problem."""


def array_digest(arrays: dict[str, np.ndarray], meta: dict | None = None) -> str:
    h = hashlib.sha256()
    if meta is not None:
        h.update(json.dumps(meta, sort_keys=True).encode())
    for name in arrays:
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.astype(_DTYPES[_kind(a)], copy=False).tobytes())
    return h.hexdigest()


def _kind(a: np.ndarray) -> str:
    return "i8" if np.issubdtype(a.dtype, np.integer) else "f8"


def write_container(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> str:
    entries = []
    chunks = []
    offset = 0
    for name, a in arrays.items():
        k = _kind(a)
        raw = np.ascontiguousarray(a, dtype=_DTYPES[k]).tobytes()
        entries.append(
            {"name": name, "dtype": k, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    data = b"".join(chunks)
    header = {
        "kind": kind,
        "meta": meta,
        "arrays": entries,
        "digest": hashlib.sha256(data).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(data)
    return header["digest"]


def read_container(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(meta, arrays)``; raises :class:`ContainerError` with an offset on corruption."""
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ContainerError(f"{path}: bad magic at offset 0")
    if len(blob) < 16:
        raise ContainerError(f"{path}: truncated header length at offset 8")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise ContainerError(f"{path}: header of {hlen} bytes runs past end of file at offset 16")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = getattr(exc, "pos", getattr(exc, "start", 0))
        raise ContainerError(f"{path}: unreadable header at offset {16 + pos}: {exc}") from None
    if kind is not None and header.get("kind") != kind:
        raise ContainerError(f"{path}: expected a {kind!r} container, found {header.get('kind')!r}")
    base = 16 + hlen
    data = blob[base:]
    if hashlib.sha256(data).hexdigest() != header.get("digest"):
        raise ContainerError(f"{path}: data section checksum mismatch (section starts at offset {base})")
    arrays = {}
    for entry in header["arrays"]:
        start = entry["offset"]
        end = start + entry["nbytes"]
        if end > len(data):
            raise ContainerError(f"{path}: array {entry['name']!r} truncated at offset {base + start}")
        a = np.frombuffer(data[start:end], dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        arrays[entry["name"]] = a.astype(a.dtype.newbyteorder("="), copy=True)
    return header["meta"], arrays
