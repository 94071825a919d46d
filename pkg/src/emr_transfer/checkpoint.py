"""JSON parameter checkpoints with base64-packed little-endian float64 tensors.

Document layout::

    {"format_version": 1,
     "meta": {...},
     "tensors": {name: {"shape": [...], "data_b64": "..."}}}

Keys are sorted and the text is produced deterministically, so saving the
same parameters twice yields byte-identical files.
"""

from __future__ import annotations

import base64
import binascii
import json
import os
from pathlib import Path

import numpy as np

from .errors import CheckpointError

FORMAT_VERSION = 1


def encode_tensor(arr) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(a.shape), "data_b64": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_tensor(doc, name="?") -> np.ndarray:
    try:
        shape = tuple(int(s) for s in doc["shape"])
        raw = base64.b64decode(doc["data_b64"].encode("ascii"), validate=True)
    except (KeyError, TypeError, ValueError, binascii.Error) as e:
        raise CheckpointError(f"tensor {name!r}: corrupt entry ({e})") from None
    n = int(np.prod(shape, dtype=np.int64))
    if len(raw) != 8 * n:
        raise CheckpointError(f"tensor {name!r}: expected {8 * n} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def dumps(tensors: dict, meta: dict | None = None) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "tensors": {k: encode_tensor(v) for k, v in tensors.items()},
    }
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def loads(text: str):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint is not valid JSON: {e}") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CheckpointError("checkpoint missing format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {doc['format_version']!r}")
    if not isinstance(doc.get("tensors"), dict):
        raise CheckpointError("checkpoint missing tensors")
    tensors = {k: decode_tensor(v, k) for k, v in doc["tensors"].items()}
    return tensors, doc.get("meta", {})


def save(path, tensors: dict, meta: dict | None = None):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps(tensors, meta), encoding="utf-8")
    os.replace(tmp, path)


def load(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    return loads(text)
