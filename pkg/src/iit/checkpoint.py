"""Parameter checkpoints: a versioned text header followed by raw float64 data.

Header lines::

    IITCKPT 1
    param <name> <rows> <cols> <byte offset>
    ...
    sha256 <hex digest of the data block>
    END

Names may not contain whitespace. Data is little-endian, row-major.
"""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Mapping

import numpy as np

from iit.errors import ChecksumMismatch, ShapeError

MAGIC = "IITCKPT"
VERSION = 1


def dumps(params: Mapping[str, np.ndarray]) -> bytes:
    lines = [f"{MAGIC} {VERSION}"]
    blocks = []
    offset = 0
    for name in sorted(params):
        if not name or any(c.isspace() for c in name):
            raise ValueError(f"bad parameter name {name!r}")
        a = np.ascontiguousarray(params[name], dtype="<f8")
        if a.ndim != 2:
            a = a.reshape(1, -1) if a.ndim < 2 else a
            if a.ndim != 2:
                raise ShapeError(f"{name} has rank {a.ndim}")
        lines.append(f"param {name} {a.shape[0]} {a.shape[1]} {offset}")
        raw = a.tobytes()
        blocks.append(raw)
        offset += len(raw)
    data = b"".join(blocks)
    lines.append(f"sha256 {hashlib.sha256(data).hexdigest()}")
    lines.append("END")
    return ("\n".join(lines) + "\n").encode("ascii") + data


def loads(blob: bytes) -> dict[str, np.ndarray]:
    lines = []
    pos = 0
    while True:
        end = blob.find(b"\n", pos)
        if end < 0:
            raise ChecksumMismatch("truncated checkpoint header")
        line = blob[pos:end].decode("ascii", errors="replace")
        pos = end + 1
        if line == "END":
            break
        lines.append(line)
    if not lines or lines[0] != f"{MAGIC} {VERSION}":
        raise ChecksumMismatch("not a version 1 checkpoint")
    data = blob[pos:]
    entries, digest = [], None
    for line in lines[1:]:
        parts = line.split()
        if parts[0] == "param" and len(parts) == 5:
            entries.append((parts[1], int(parts[2]), int(parts[3]), int(parts[4])))
        elif parts[0] == "sha256" and len(parts) == 2:
            digest = parts[1]
        else:
            raise ChecksumMismatch(f"bad header line {line!r}")
    if digest != hashlib.sha256(data).hexdigest():
        raise ChecksumMismatch("data block does not match its checksum")
    out = {}
    for name, rows, cols, offset in entries:
        size = rows * cols * 8
        if offset + size > len(data):
            raise ChecksumMismatch(f"{name} runs past the data block")
        out[name] = np.frombuffer(data, dtype="<f8", count=rows * cols,
                                  offset=offset).reshape(rows, cols).astype(np.float64)
    return out


def save(path: str | Path, params: Mapping[str, np.ndarray]) -> str:
    """Write a checkpoint; returns the sha256 of the whole file."""
    blob = dumps(params)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def check_template(params: Mapping[str, np.ndarray], template: Mapping[str, np.ndarray]) -> None:
    """Raise ShapeError unless ``params`` covers ``template`` with equal shapes."""
    for name, ref in template.items():
        if name not in params:
            raise ShapeError(f"checkpoint lacks {name}")
        if params[name].shape != np.shape(ref):
            raise ShapeError(f"{name}: checkpoint {params[name].shape}, model {np.shape(ref)}")
