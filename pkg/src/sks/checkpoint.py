"""``.skpt`` checkpoints: a JSON index followed by SKST records in name order.

Layout: b"SKPT", uint32 little-endian index length, UTF-8 JSON index
``{"config", "params": [{"name", "offset", "nbytes"}], "stage", "step", "version"}``,
then the concatenated SKST records (offsets relative to the end of the index).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import decode_tensor, encode_tensor
from .nn import Module

MAGIC = b"SKPT"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict
    stage: str
    step: int

    def names(self) -> list[str]:
        return sorted(self.params)


def encode_checkpoint(params: dict[str, np.ndarray], config: dict, stage: str, step: int) -> bytes:
    records, entries, offset = [], [], 0
    for name in sorted(params):
        blob = encode_tensor(np.asarray(params[name]), name)
        entries.append({"name": name, "nbytes": len(blob), "offset": offset})
        records.append(blob)
        offset += len(blob)
    index = {"config": config, "params": entries, "stage": stage, "step": int(step), "version": VERSION}
    head = json.dumps(index, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(records)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an SKPT checkpoint")
    (hlen,) = struct.unpack("<I", blob[4:8])
    index = json.loads(blob[8:8 + hlen].decode("utf-8"))
    if index.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {index.get('version')}")
    base = 8 + hlen
    params = {}
    for entry in index["params"]:
        start = base + entry["offset"]
        name, array = decode_tensor(blob[start:start + entry["nbytes"]])
        if name != entry["name"]:
            raise CheckpointError(f"record name {name!r} does not match index entry {entry['name']!r}")
        params[name] = array
    return Checkpoint(params, index["config"], index["stage"], index["step"])


def save_checkpoint(path, module: Module, config: dict, stage: str, step: int, prefix: str = "") -> Path:
    params = {name: p.data for name, p in module.named_parameters(prefix).items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(params, config, stage, step))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


def load_into(module: Module, ckpt: Checkpoint, prefix: str = "", only: str | None = None) -> None:
    """Copy checkpoint tensors into ``module``'s parameters.

    The checkpoint's names must exactly equal the module's (restricted to names
    starting with ``only`` when given); any missing, unexpected or mis-shaped
    tensor raises CheckpointError.
    """
    named = module.named_parameters(prefix)
    if only is not None:
        named = {k: v for k, v in named.items() if k.startswith(only)}
    missing = sorted(set(named) - set(ckpt.params))
    unexpected = sorted(set(ckpt.params) - set(named))
    if missing or unexpected:
        raise CheckpointError(f"checkpoint topology mismatch: missing {missing[:5]}{'...' if len(missing) > 5 else ''}"
                              f" ({len(missing)}), unexpected {unexpected[:5]}"
                              f"{'...' if len(unexpected) > 5 else ''} ({len(unexpected)})")
    for name, p in named.items():
        array = ckpt.params[name]
        if array.shape != p.shape:
            raise CheckpointError(f"{name}: checkpoint shape {array.shape} != model shape {p.shape}")
        p.data = array.astype(p.dtype, copy=True)
