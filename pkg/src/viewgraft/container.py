"""Bit-exact tensor container.

Layout: an 8-byte little-endian unsigned header length, a UTF-8 JSON
header, the contiguous little-endian float32 payload, then a 4-byte
little-endian CRC32 of everything before it. The header maps
tensor-name -> {"dtype": "f32", "shape": [r, c], "offset": o, "length": l}
with offsets relative to the payload start, plus a "__metadata__" object
of string keys. Unknown metadata keys and unknown per-tensor fields are
ignored on load, so files written by newer tools still open.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError
from .numerics.matrix import Matrix, check_matrix

_METADATA_KEY = "__metadata__"


def save_tensors(path, tensors: dict[str, Matrix], metadata: dict[str, str] | None = None) -> None:
    header: dict = {_METADATA_KEY: dict(metadata or {})}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        t = check_matrix(tensors[name], name)
        blob = np.ascontiguousarray(t, dtype="<f4").tobytes()
        header[name] = {
            "dtype": "f32",
            "shape": [int(t.shape[0]), int(t.shape[1])],
            "offset": offset,
            "length": len(blob),
        }
        blobs.append(blob)
        offset += len(blob)

    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = struct.pack("<Q", len(header_bytes)) + header_bytes + b"".join(blobs)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    Path(path).write_bytes(body + struct.pack("<I", crc))


def load_tensors(path) -> tuple[dict[str, Matrix], dict[str, str]]:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError("file too short for header length and checksum", offset=0)

    stored_crc = struct.unpack("<I", raw[-4:])[0]
    actual_crc = zlib.crc32(raw[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise FormatError(
            f"checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}",
            offset=len(raw) - 4,
        )

    header_len = struct.unpack("<Q", raw[:8])[0]
    payload_start = 8 + header_len
    if payload_start > len(raw) - 4:
        raise FormatError(f"header length {header_len} exceeds file size", offset=0)
    try:
        header = json.loads(raw[8:payload_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed JSON header: {exc}", offset=8) from exc
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object", offset=8)

    payload = raw[payload_start : len(raw) - 4]
    metadata = header.get(_METADATA_KEY, {})
    if not isinstance(metadata, dict):
        raise FormatError("__metadata__ must be an object", offset=8)

    tensors: dict[str, Matrix] = {}
    for name, info in header.items():
        if name == _METADATA_KEY:
            continue
        if not isinstance(info, dict):
            raise FormatError(f"tensor entry {name!r} must be an object", offset=8)
        if info.get("dtype") != "f32":
            raise FormatError(f"tensor {name!r} has unsupported dtype {info.get('dtype')!r}", offset=8)
        shape = info.get("shape")
        off = info.get("offset")
        length = info.get("length")
        if not (isinstance(shape, list) and len(shape) == 2 and all(isinstance(d, int) for d in shape)):
            raise FormatError(f"tensor {name!r} has invalid shape {shape!r}", offset=8)
        if not isinstance(off, int) or not isinstance(length, int) or off < 0 or length < 0:
            raise FormatError(f"tensor {name!r} has invalid offset/length", offset=8)
        if length != shape[0] * shape[1] * 4:
            raise FormatError(
                f"tensor {name!r} length {length} does not match shape {shape}",
                offset=payload_start + off,
            )
        if off + length > len(payload):
            raise FormatError(f"tensor {name!r} payload is truncated", offset=payload_start + off)
        arr = np.frombuffer(payload, dtype="<f4", count=shape[0] * shape[1], offset=off)
        arr = np.ascontiguousarray(arr.astype(np.float32).reshape(shape[0], shape[1]))
        arr.setflags(write=False)
        tensors[name] = arr
    return tensors, {str(k): str(v) for k, v in metadata.items()}
