"""Versioned checkpoint container.

Single-file binary format: magic, format version, a JSON header (kind,
canonical config text + hash, extras, tensor directory), then raw
little-endian C-order tensor bytes sorted by name. Serialization is
canonical, so identical state produces identical files. Loading refuses
containers whose config hash does not match the caller's expectation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config, parse_config_text
from .errors import CheckpointError, CompatibilityError

MAGIC = b"LSNGCKPT"
FORMAT_VERSION = 1
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


@dataclass
class Checkpoint:
    kind: str  # "vae" or "ldm"
    config: Config
    config_hash: str
    tensors: dict[str, np.ndarray]
    extras: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, kind: str, cfg: Config,
                    tensors: dict[str, np.ndarray], extras: dict | None = None) -> None:
    names = sorted(tensors)
    directory = []
    blobs = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(tensors[name])
        dtype = arr.dtype.newbyteorder("<").str
        if dtype not in _DTYPES:
            arr = arr.astype(np.float32)
            dtype = "<f4"
        raw = arr.astype(_DTYPES[dtype], copy=False).tobytes()
        directory.append({"name": name, "dtype": dtype,
                          "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "kind": kind,
        "config_text": cfg.canonical_text(),
        "config_hash": cfg.config_hash(),
        "extras": extras or {},
        "tensors": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path,
                    expected_hash: str | None = None) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    with open(p, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{p}: not a checkpoint container")
        version, header_len = struct.unpack("<IQ", fh.read(12))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{p}: unsupported container version {version}")
        try:
            header = json.loads(fh.read(header_len))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{p}: corrupt header") from exc
        data = fh.read()
    cfg = parse_config_text(header["config_text"])
    if cfg.config_hash() != header["config_hash"]:
        raise CheckpointError(f"{p}: config hash does not match stored config")
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise CompatibilityError(
            f"{p}: config hash {header['config_hash']} != expected {expected_hash}")
    tensors = {}
    for entry in header["tensors"]:
        raw = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{p}: truncated tensor {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(kind=header["kind"], config=cfg,
                      config_hash=header["config_hash"],
                      tensors=tensors, extras=header["extras"])
