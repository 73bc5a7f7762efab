"""Flat, versioned binary container for model parameters.

Layout (integers little-endian)::

    magic        4 bytes  b"SGCK"
    version      u16
    header_len   u32
    header       UTF-8 JSON, keys sorted:
                   {"config": {...ModelConfig fields...},
                    "meta": {...free-form JSON...},
                    "arrays": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload      raw array bytes, concatenated in header order

Arrays are stored as ``<f8`` or ``<i8``; offsets are relative to the start
of the payload.  Nothing time-dependent is written, so saving the same
parameters twice produces identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .errors import DataError, VersionError
from .fedformer import ModelConfig

MAGIC = b"SGCK"
VERSION = 1
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


def _code(arr: np.ndarray) -> str:
    if np.issubdtype(arr.dtype, np.integer):
        return "i8"
    if np.issubdtype(arr.dtype, np.floating):
        return "f8"
    raise DataError(f"unsupported checkpoint dtype {arr.dtype}")


def encode_checkpoint(cfg: ModelConfig, arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    index, blobs, offset = [], [], 0
    for name in arrays:
        arr = np.asarray(arrays[name])
        code = _code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        index.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"config": asdict(cfg), "meta": meta or {}, "arrays": index}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    return MAGIC + struct.pack("<HI", VERSION, len(header)) + header + b"".join(blobs)


def decode_checkpoint(blob: bytes) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    if blob[:4] != MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    if len(blob) < 10:
        raise DataError("checkpoint truncated inside the preamble")
    version, hlen = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    start = 10 + hlen
    try:
        header = json.loads(blob[10:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DataError("checkpoint header is truncated or corrupt") from None
    known = {f.name for f in fields(ModelConfig)}
    unknown = set(header["config"]) - known
    if unknown:
        raise VersionError(f"checkpoint config has unknown keys {sorted(unknown)}")
    cfg = ModelConfig(**header["config"])
    arrays = {}
    for entry in header["arrays"]:
        lo = start + entry["offset"]
        raw = blob[lo : lo + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise DataError(f"checkpoint truncated inside array {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(np.int64 if entry["dtype"] == "i8" else np.float64)
    return cfg, arrays, header["meta"]


def save_checkpoint(path: str | Path, cfg: ModelConfig, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(cfg, arrays, meta))


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None):
    """Read a checkpoint; with ``expect`` set, any config difference is a version error."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    cfg, arrays, meta = decode_checkpoint(blob)
    if expect is not None:
        a, b = asdict(cfg), asdict(expect)
        diff = sorted(k for k in a if a[k] != b[k])
        if diff:
            raise VersionError(
                "checkpoint/config mismatch: " + ", ".join(f"model.{k} {a[k]} != {b[k]}" for k in diff)
            )
    return cfg, arrays, meta
