"""Single-blob binary checkpoint container.

Layout: magic, format-version integer, header length, JSON header (kind,
config echo, array manifest), then raw little-endian array bytes in manifest
order. Writing is fully deterministic for identical inputs, so reruns with
the same seed produce byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"TDCP"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<4sIQ")


def save_state(path, kind: str, config: dict, arrays: dict[str, np.ndarray]) -> None:
    manifest = []
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        manifest.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)}
        )
        blobs.append(arr.tobytes())
    header = json.dumps(
        {"kind": kind, "config": config, "arrays": manifest},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_state(path, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _HEAD.size:
        raise CheckpointError(f"checkpoint {path} is truncated")
    magic, version, header_len = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {version}, expected {FORMAT_VERSION}"
        )
    if len(raw) < _HEAD.size + header_len:
        raise CheckpointError(f"checkpoint {path} is truncated")
    try:
        header = json.loads(raw[_HEAD.size : _HEAD.size + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint {path} has a corrupt header") from exc
    if expect_kind is not None and header.get("kind") != expect_kind:
        raise CheckpointError(
            f"checkpoint {path} holds a {header.get('kind')!r} model, expected {expect_kind!r}"
        )
    arrays: dict[str, np.ndarray] = {}
    offset = _HEAD.size + header_len
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        if len(raw) < offset + nbytes:
            raise CheckpointError(f"checkpoint {path} is truncated")
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=offset
        ).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"checkpoint {path} has trailing bytes")
    return header["config"], arrays
