"""Binary checkpoint container.

Layout: 8-byte magic "TAPERCKP", little-endian u16 version, little-endian
u32 header length, UTF-8 JSON header, then the parameters as little-endian
float32 in row-major order, concatenated in header order. The header records
the section kind ("code" / "text" / "classifier"), the producing config, a
vocabulary content hash, and every parameter's name and shape. Training is
float64 but storage narrows to float32; loading a fresh save of a loaded
model reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Sequence

import numpy as np

from .errors import CheckpointError

MAGIC = b"TAPERCKP"
VERSION = 1
KINDS = ("code", "text", "classifier")


def write_checkpoint(
    path: str,
    kind: str,
    config: dict,
    vocab_hash: str,
    named_params: Sequence,
) -> None:
    """named_params: ordered (name, float array) pairs."""
    if kind not in KINDS:
        raise CheckpointError(f"checkpoint: unknown section kind {kind!r}")
    header = {
        "kind": kind,
        "config": config,
        "vocab_hash": vocab_hash,
        "params": [{"name": n, "shape": list(a.shape)} for n, a in named_params],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in named_params:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path: str) -> tuple:
    """Returns (kind, config, vocab_hash, {name: float64 array})."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 14 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<H", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", raw, 10)
    start = 14
    if start + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})")
    if header.get("kind") not in KINDS:
        raise CheckpointError(f"{path}: unknown section kind {header.get('kind')!r}")

    params = {}
    offset = start + hlen
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated parameter {entry['name']!r}")
        flat = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        params[entry["name"]] = flat.reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after parameters")
    return header["kind"], header["config"], header["vocab_hash"], params


def expect_kind(path: str, got: str, want: str) -> None:
    if got != want:
        raise CheckpointError(f"{path}: checkpoint holds a {got!r} model, expected {want!r}")


def expect_vocab_hash(path: str, got: str, want: str) -> None:
    if got != want:
        raise CheckpointError(
            f"{path}: checkpoint was trained against a different vocabulary "
            f"(hash {got[:12]}.. != current {want[:12]}..)"
        )


def parameter_hash(named_params: Sequence) -> str:
    """Fingerprint of parameter values, used to assert models stay frozen."""
    h = hashlib.sha256()
    for name, arr in named_params:
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()
