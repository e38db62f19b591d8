"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"KPTK" | uint32 version | uint64 header length | header JSON | payload

The header holds ``stage``, ``config_hash``, free-form ``meta`` and a tensor
table of ``{name, dtype, shape, offset, nbytes}`` entries whose offsets index
into the raw, uncompressed payload.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError

MAGIC = b"KPTK"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config_dict: dict) -> str:
    return hashlib.sha256(canonical_json(config_dict).encode()).hexdigest()


@dataclass
class Checkpoint:
    stage: str
    config_hash: str
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        table, chunks, offset = [], [], 0
        for name in sorted(self.arrays):
            arr = np.asarray(self.arrays[name])
            if arr.dtype.name not in _DTYPES:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
            raw = np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.name]).tobytes()
            table.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        header = canonical_json({"stage": self.stage, "config_hash": self.config_hash,
                                 "meta": self.meta, "tensors": table}).encode()
        return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:4] != MAGIC:
            raise CheckpointError("not a checkpoint: bad magic")
        try:
            version, hlen = struct.unpack("<IQ", blob[4:16])
        except struct.error:
            raise CheckpointError("truncated checkpoint header") from None
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(blob[16:16 + hlen])
        except (json.JSONDecodeError, UnicodeDecodeError):
            raise CheckpointError("corrupt checkpoint header") from None
        payload = memoryview(blob)[16 + hlen:]
        arrays = {}
        for entry in header["tensors"]:
            start, n = entry["offset"], entry["nbytes"]
            if start + n > len(payload):
                raise CheckpointError(f"payload truncated at tensor {entry['name']!r}")
            arr = np.frombuffer(payload[start:start + n], dtype=_DTYPES[entry["dtype"]])
            arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"])
        return cls(header["stage"], header["config_hash"], arrays, header["meta"])

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def tensor_hashes(self, prefix: str = "") -> dict[str, str]:
        return {n: hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()
                for n, a in sorted(self.arrays.items()) if n.startswith(prefix)}


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    blob = ckpt.to_bytes()
    try:
        Path(path).write_bytes(blob)
    except OSError as err:
        raise CheckpointError(f"cannot write checkpoint {path}: {err}") from None
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path, expected_config_hash: str | None = None) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from None
    ckpt = Checkpoint.from_bytes(blob)
    embedded = ckpt.meta.get("run_config")
    if embedded is not None and config_hash(embedded) != ckpt.config_hash:
        raise CheckpointError("checkpoint config hash does not match its embedded configuration")
    if expected_config_hash is not None and ckpt.config_hash != expected_config_hash:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {ckpt.config_hash[:12]} vs expected {expected_config_hash[:12]}"
        )
    return ckpt
