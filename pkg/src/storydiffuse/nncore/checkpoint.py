"""Checkpoint I/O: a flat little-endian f64 blob plus a plain-text manifest.

Manifest layout (UTF-8, tab separated)::

    storydiffuse-ckpt-v1
    meta	{json}
    param	<name>	<offset>	<shape as d0,d1,...>	<frozen 0|1>

Offsets count f64 elements from the start of the blob.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .layers import Module

VERSION = "storydiffuse-ckpt-v1"
BLOB = "params.bin"
MANIFEST = "manifest.txt"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: Module, meta: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [VERSION, "meta\t" + json.dumps(meta or {}, sort_keys=True)]
    chunks = []
    offset = 0
    for name, p in model.named_parameters():
        # ascontiguousarray would promote 0-d parameters to shape (1,)
        arr = np.asarray(p.data, dtype="<f8")
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"param\t{name}\t{offset}\t{shape}\t{int(p.frozen)}")
        chunks.append(arr.reshape(-1))
        offset += arr.size
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    (path / BLOB).write_bytes(blob.astype("<f8").tobytes())
    (path / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> tuple[dict, list[tuple[str, int, tuple[int, ...], bool]]]:
    text = (Path(path) / MANIFEST).read_text(encoding="utf-8").splitlines()
    if not text or text[0].strip() != VERSION:
        raise CheckpointError(f"{path}: missing version tag {VERSION!r}")
    meta: dict = {}
    entries = []
    for line in text[1:]:
        if not line.strip():
            continue
        parts = line.split("\t")
        if parts[0] == "meta":
            meta = json.loads(parts[1])
        elif parts[0] == "param":
            shape = tuple(int(s) for s in parts[3].split(",")) if parts[3] else ()
            entries.append((parts[1], int(parts[2]), shape, parts[4] == "1"))
        else:
            raise CheckpointError(f"{path}: bad manifest line {line!r}")
    return meta, entries


def load_meta(path) -> dict:
    return read_manifest(path)[0]


def load_checkpoint(path, model: Module) -> dict:
    """Copy stored values into ``model``'s parameters; returns the meta dict."""
    meta, entries = read_manifest(path)
    blob = np.frombuffer((Path(path) / BLOB).read_bytes(), dtype="<f8")
    params = dict(model.named_parameters())
    stored = {e[0] for e in entries}
    missing = set(params) - stored
    if missing:
        raise CheckpointError(f"{path}: checkpoint lacks parameters {sorted(missing)}")
    for name, offset, shape, _frozen in entries:
        if name not in params:
            raise CheckpointError(f"{path}: unexpected parameter {name}")
        p = params[name]
        if tuple(p.shape) != shape:
            raise CheckpointError(f"{path}: {name} shape {shape} != model {p.shape}")
        n = int(np.prod(shape)) if shape else 1
        p.data[...] = blob[offset : offset + n].reshape(shape).astype(p.data.dtype)
    return meta
