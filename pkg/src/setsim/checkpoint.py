"""Flat binary container for named float64 tensors.

Layout::

    SETSIM-CKPT 1\\n
    <manifest byte length>\\n
    <manifest: UTF-8 text lines>
    <payload: little-endian float64 tensors, back to back>

Manifest lines are ``meta <key> <value>``, ``tensor <name> <shape> <offset>
<nbytes>`` (shape as comma-separated ints, empty for scalars, offset
relative to payload start) and a final ``sha256 <hex digest of payload>``.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

import numpy as np

MAGIC = b"SETSIM-CKPT 1\n"


class CheckpointError(ValueError):
    """Malformed, truncated or mismatched checkpoint file."""


def write_container(path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    meta = meta or {}
    lines, chunks, offset = [], [], 0
    for key, value in meta.items():
        if any(ch.isspace() for ch in key) or "\n" in str(value):
            raise CheckpointError(f"meta entry {key!r} cannot be stored")
        lines.append(f"meta {key} {value}")
    for name, arr in tensors.items():
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        shape = ",".join(str(d) for d in np.shape(arr))
        lines.append(f"tensor {name} {shape} {offset} {len(data)}")
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    lines.append(f"sha256 {hashlib.sha256(payload).hexdigest()}")
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    blob = MAGIC + f"{len(manifest)}\n".encode("ascii") + manifest + payload
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Parse and verify a container; nothing is returned unless all checks pass."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic header")
    rest = blob[len(MAGIC):]
    nl = rest.find(b"\n")
    try:
        manifest_len = int(rest[:nl])
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable manifest length") from exc
    start = nl + 1
    if len(rest) < start + manifest_len:
        raise CheckpointError(f"{path}: truncated manifest")
    manifest = rest[start : start + manifest_len].decode("utf-8")
    payload = rest[start + manifest_len:]

    meta, entries, digest = {}, [], None
    for lineno, line in enumerate(manifest.splitlines(), 1):
        kind, _, body = line.partition(" ")
        if kind == "meta":
            key, _, value = body.partition(" ")
            meta[key] = value
        elif kind == "tensor":
            parts = body.split(" ")
            if len(parts) != 4:
                raise CheckpointError(f"{path}: manifest line {lineno} malformed: {line!r}")
            name, shape_s, off_s, nbytes_s = parts
            shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
            entries.append((name, shape, int(off_s), int(nbytes_s)))
        elif kind == "sha256":
            digest = body.strip()
        else:
            raise CheckpointError(f"{path}: manifest line {lineno} unknown entry {kind!r}")
    if digest is None:
        raise CheckpointError(f"{path}: manifest has no payload digest")

    expected = sum(e[3] for e in entries)
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, manifest declares {expected}")
    if hashlib.sha256(payload).hexdigest() != digest:
        raise CheckpointError(f"{path}: payload digest mismatch")

    tensors = {}
    for name, shape, off, nbytes in entries:
        if nbytes != 8 * int(np.prod(shape, dtype=np.int64)) or off + nbytes > len(payload):
            raise CheckpointError(f"{path}: tensor {name} shape {shape} disagrees with its extent")
        arr = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=off)
        tensors[name] = arr.reshape(shape).astype(np.float64)
    return tensors, meta


def save_params(path, params: dict[str, np.ndarray]) -> None:
    write_container(path, params, {"kind": "encoder"})


def load_params(path, expected_shapes: dict[str, tuple[int, ...]] | None = None) -> dict[str, np.ndarray]:
    tensors, _ = read_container(path)
    if expected_shapes is not None:
        missing = set(expected_shapes) - set(tensors)
        if missing:
            raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
        for name, shape in expected_shapes.items():
            if tensors[name].shape != tuple(shape):
                raise CheckpointError(
                    f"{path}: {name} has shape {tensors[name].shape}, expected {tuple(shape)}")
    return tensors
