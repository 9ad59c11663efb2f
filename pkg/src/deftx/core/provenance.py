"""
Core - Provenance

Run ids and content digests used in vector metadata and run manifests.
"""

import hashlib
import json
import uuid
from pathlib import Path
from typing import Any, Iterable, Tuple, Union

import numpy as np
from pydantic import BaseModel


def create_run_id() -> str:
    """Generate a unique run ID"""
    return str(uuid.uuid4())


def digest_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def digest_json(data: Any) -> str:
    """Digest of a JSON-serialisable object with sorted keys"""
    return digest_bytes(json.dumps(data, sort_keys=True, default=str).encode("utf-8"))


def digest_model(model: BaseModel) -> str:
    return digest_json(model.model_dump(mode="json"))


def digest_arrays(items: Iterable[Tuple[str, np.ndarray]]) -> str:
    """Digest over (name, little-endian payload) pairs in the given order"""
    h = hashlib.sha256()
    for name, array in items:
        h.update(name.encode("utf-8"))
        h.update(str(tuple(array.shape)).encode("ascii"))
        h.update(np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes())
    return h.hexdigest()


def digest_file(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stable_int(*parts: Any) -> int:
    """Platform-independent 63-bit integer derived from the given parts"""
    text = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little") >> 1
