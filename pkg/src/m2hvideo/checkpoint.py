"""Checkpoint container: one archive of named parameter arrays plus metadata.

Byte layout (stable, schema_version 1): a standard NPZ zip archive. Each
parameter is stored as an ordinary ``.npy`` member keyed by its flat name
(shape and dtype live in the npy header). The member ``__meta__`` holds the
UTF-8 JSON metadata record as a uint8 array. Any tool that reads NPZ can
inspect a checkpoint.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError

SCHEMA_VERSION = 1
_META_KEY = "__meta__"


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write ``arrays`` and ``meta`` to ``path`` (atomic via temp + rename)."""
    path = Path(path)
    record = dict(meta)
    record.setdefault("schema_version", SCHEMA_VERSION)
    meta_bytes = np.frombuffer(json.dumps(record, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    if _META_KEY in arrays:
        raise ConfigError(f"array name {_META_KEY!r} is reserved")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **{_META_KEY: meta_bytes}, **arrays)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (arrays, meta) written by :func:`save_checkpoint`."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    with np.load(path) as data:
        if _META_KEY not in data:
            raise ConfigError(f"{path} is not a recognized checkpoint (missing metadata)")
        meta = json.loads(bytes(data[_META_KEY].tobytes()).decode("utf-8"))
        if meta.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(
                f"unsupported checkpoint schema_version {meta.get('schema_version')!r}"
            )
        arrays = {k: data[k] for k in data.files if k != _META_KEY}
    return arrays, meta


def checkpoint_hash(path: str | Path) -> str:
    """SHA-256 of the checkpoint file, for report provenance."""
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
