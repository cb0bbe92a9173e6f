"""Tensor container used for checkpoints and morphable-model assets.

The layout is byte-compatible with the ``safetensors`` format::

    [8 bytes little-endian u64 header length N]
    [N bytes JSON header, space padded to a multiple of 8]
    [raw little-endian tensor data]

Float64 and int64 arrays keep their dtype (``F64`` / ``I64``); anything else
is stored as float32. The header maps every tensor name to
``{"dtype": "F32", "shape": [...],
"data_offsets": [begin, end]}`` and carries a ``__metadata__`` entry whose
single key ``"json"`` holds the caller's metadata as a JSON string. Keys are
written sorted so identical inputs give identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import ValidationError

_ALIGN = 8
_DTYPES = {"F32": "<f4", "F64": "<f8", "I64": "<i8"}


def _tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float64:
        return "F64"
    if arr.dtype == np.int64:
        return "I64"
    return "F32"


def dumps(tensors: Mapping[str, Any], metadata: Mapping[str, Any] | None = None) -> bytes:
    header: dict[str, Any] = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(_to_numpy(tensors[name]))
        tag = _tag(arr)
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[tag])
        raw = arr.tobytes()
        header[name] = {"dtype": tag, "shape": list(arr.shape), "data_offsets": [offset, offset + len(raw)]}
        chunks.append(raw)
        offset += len(raw)
    meta_json = json.dumps(dict(metadata or {}), sort_keys=True, separators=(",", ":"))
    header["__metadata__"] = {"json": meta_json}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    head += b" " * (-len(head) % _ALIGN)
    return struct.pack("<Q", len(head)) + head + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(blob) < 8:
        raise ValidationError("container too short")
    (n,) = struct.unpack("<Q", blob[:8])
    if 8 + n > len(blob):
        raise ValidationError("container header length exceeds file size")
    header = json.loads(blob[8 : 8 + n].decode("utf-8"))
    meta_block = header.pop("__metadata__", {}) or {}
    metadata = json.loads(meta_block.get("json", "{}"))
    data = memoryview(blob)[8 + n :]
    tensors = {}
    for name, info in header.items():
        if info["dtype"] not in _DTYPES:
            raise ValidationError(f"unsupported dtype {info['dtype']!r} for {name}")
        begin, end = info["data_offsets"]
        arr = np.frombuffer(data[begin:end], dtype=_DTYPES[info["dtype"]]).reshape(info["shape"])
        tensors[name] = arr.copy()
    return tensors, metadata


def save(path: str | Path, tensors: Mapping[str, Any], metadata: Mapping[str, Any] | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, metadata))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_bytes())


def _to_numpy(x: Any) -> np.ndarray:
    if hasattr(x, "detach"):
        return x.detach().cpu().numpy()
    return np.asarray(x)
