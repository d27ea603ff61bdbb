"""SKST tensor records and 8-bit PGM mask export.

SKST layout: b"SKST", uint32 little-endian header length, UTF-8 JSON header
``{"dtype": "f32"|"f64", "name": str, "shape": [...]}``, then the row-major
little-endian scalars.
"""
from __future__ import annotations

import io
import json
import re
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .tensor import DTYPES, dtype_name

MAGIC = b"SKST"


class FormatError(ValueError):
    pass


def encode_tensor(array: np.ndarray, name: str = "") -> bytes:
    array = np.asarray(array)
    if array.dtype.kind != "f":
        array = array.astype(np.float32)
    kind = dtype_name(array.dtype.newbyteorder("<"))
    header = json.dumps({"dtype": kind, "name": name, "shape": list(array.shape)},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    data = np.ascontiguousarray(array, dtype=DTYPES[kind]).tobytes()
    return MAGIC + struct.pack("<I", len(header)) + header + data


def read_tensor_from(stream: BinaryIO) -> tuple[str, np.ndarray]:
    magic = stream.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    raw_len = stream.read(4)
    if len(raw_len) != 4:
        raise FormatError("truncated SKST header length")
    (hlen,) = struct.unpack("<I", raw_len)
    try:
        header = json.loads(stream.read(hlen).decode("utf-8"))
        dtype = DTYPES[header["dtype"]]
        shape = tuple(int(n) for n in header["shape"])
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed SKST header: {exc}") from exc
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = stream.read(nbytes)
    if len(payload) != nbytes:
        raise FormatError(f"truncated SKST payload: expected {nbytes} bytes, got {len(payload)}")
    return header.get("name", ""), np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def decode_tensor(blob: bytes) -> tuple[str, np.ndarray]:
    return read_tensor_from(io.BytesIO(blob))


def save_tensor(path, array: np.ndarray, name: str = "") -> None:
    Path(path).write_bytes(encode_tensor(array, name))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor_from(fh)[1]


def save_pgm(path, mask: np.ndarray) -> None:
    """Binary (P5) PGM, foreground written as 255."""
    mask = np.asarray(mask)
    if mask.ndim == 3 and mask.shape[-1] == 1:
        mask = mask[..., 0]
    if mask.ndim != 2:
        raise ValueError(f"PGM export needs a 2-d mask, got {mask.shape}")
    h, w = mask.shape
    pixels = np.where(mask > 0, 255, 0).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def load_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if m is None:
        raise FormatError("not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval > 255:
        raise FormatError("16-bit PGM not supported")
    return np.frombuffer(blob[m.end(): m.end() + w * h], dtype=np.uint8).reshape(h, w)
