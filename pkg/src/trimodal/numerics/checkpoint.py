"""Checkpoint container: text manifest + little-endian float64 payload.

Layout::

    TMCKPT1\\n
    meta <json>\\n
    param <name> <d0,d1,...|-> <offset> <nbytes>\\n   (one per array)
    end <crc32>\\n
    \\n
    <payload bytes>

Offsets are relative to the payload start.  Arrays are stored as
little-endian float64 in row-major order, so a save/load round trip is
bit-exact.  The CRC covers the payload.
"""

from __future__ import annotations

import json
import zlib

import numpy as np

__all__ = ["save_arrays", "load_arrays", "CheckpointError"]

MAGIC = b"TMCKPT1\n"


class CheckpointError(RuntimeError):
    pass


def _dims_str(shape):
    return ",".join(str(s) for s in shape) if shape else "-"


def _parse_dims(s):
    return () if s == "-" else tuple(int(x) for x in s.split(","))


def save_arrays(path, named_arrays, meta=None):
    """Write (name, ndarray) pairs; names must be unique and space-free."""
    seen = set()
    chunks = []
    lines = []
    offset = 0
    for name, arr in named_arrays:
        if " " in name or "\n" in name:
            raise ValueError(f"invalid parameter name {name!r}")
        if name in seen:
            raise ValueError(f"duplicate parameter name {name!r}")
        seen.add(name)
        a = np.asarray(arr, dtype=np.float64)
        raw = a.astype("<f8", copy=False).tobytes(order="C")
        lines.append(f"param {name} {_dims_str(a.shape)} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    crc = zlib.crc32(payload)
    header = MAGIC
    header += ("meta " + json.dumps(meta or {}, sort_keys=True) + "\n").encode()
    header += ("\n".join(lines) + "\n" if lines else "").encode()
    header += f"end {crc}\n\n".encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_arrays(path):
    """Read a checkpoint; returns (meta, {name: ndarray})."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        head_end = blob.index(b"\n\n", len(MAGIC))
    except ValueError:
        raise CheckpointError("truncated checkpoint: header never ends") from None
    header = blob[len(MAGIC):head_end].decode()
    payload = blob[head_end + 2:]

    meta = {}
    entries = []
    crc_expected = None
    for line in header.splitlines():
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            meta = json.loads(rest)
        elif kind == "param":
            name, dims, off, nbytes = rest.rsplit(" ", 3)[-4:]
            entries.append((name, _parse_dims(dims), int(off), int(nbytes)))
        elif kind == "end":
            crc_expected = int(rest)
        else:
            raise CheckpointError(f"unknown manifest line kind {kind!r}")
    if crc_expected is None:
        raise CheckpointError("manifest has no end/crc line")
    if zlib.crc32(payload) != crc_expected:
        raise CheckpointError("payload checksum mismatch")

    out = {}
    for name, dims, off, nbytes in entries:
        if off + nbytes > len(payload):
            raise CheckpointError(f"truncated payload for parameter {name!r}")
        arr = np.frombuffer(payload[off:off + nbytes], dtype="<f8").astype(np.float64)
        expect = int(np.prod(dims)) if dims else 1
        if arr.size != expect:
            raise CheckpointError(f"size mismatch for parameter {name!r}")
        out[name] = arr.reshape(dims).copy()
    return meta, out
