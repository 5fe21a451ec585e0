"""Self-describing array container used for checkpoints, datasets and rollouts.

Layout::

    b"FLXP"                      4-byte magic
    <uint64 little-endian>       header length in bytes
    <header>                     UTF-8 JSON, space padded to a multiple of 8
    <body>                       raw little-endian array buffers

The header always carries ``format`` and ``version`` plus an ``arrays`` table
mapping each name to ``dtype`` (numpy string, e.g. ``"<f4"``), ``shape``,
``offset`` (relative to body start) and ``nbytes``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FLXP"
VERSION = 1


class FormatError(ValueError):
    pass


def write(path, fmt: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write ``arrays`` (in insertion order) with ``meta`` into ``path``."""
    table = {}
    offset = 0
    bufs = []
    for name, a in arrays.items():
        a = np.ascontiguousarray(a)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        b = a.tobytes()
        table[name] = {"dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(b)}
        bufs.append(b)
        offset += len(b)
    header = {"format": fmt, "version": VERSION, "meta": meta, "arrays": table}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    hb += b" " * (-len(hb) % 8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        for b in bufs:
            f.write(b)
    tmp.replace(path)


def read_header(path) -> tuple[dict, int]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise FormatError(f"{path}: not a flexipatch container")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n).decode())
    if "version" not in header or "format" not in header:
        raise FormatError(f"{path}: header missing version/format")
    if header["version"] > VERSION:
        raise FormatError(f"{path}: version {header['version']} is newer than supported {VERSION}")
    return header, 12 + n


def read(path, fmt: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(meta, arrays)``; checks ``fmt`` when given."""
    header, body = read_header(path)
    if fmt is not None and header["format"] != fmt:
        raise FormatError(f"{path}: expected format {fmt!r}, found {header['format']!r}")
    raw = Path(path).read_bytes()
    arrays = {}
    # header keys are sorted; body offsets preserve the written order
    for name, spec in sorted(header["arrays"].items(), key=lambda kv: kv[1]["offset"]):
        start = body + spec["offset"]
        chunk = raw[start : start + spec["nbytes"]]
        if len(chunk) != spec["nbytes"]:
            raise FormatError(f"{path}: truncated array {name!r}")
        arrays[name] = np.frombuffer(chunk, dtype=np.dtype(spec["dtype"])).reshape(spec["shape"]).copy()
    return header["meta"], arrays


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
