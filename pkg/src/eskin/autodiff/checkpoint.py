"""Versioned checkpoint container: one ``.npz`` with a JSON header entry."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

FORMAT = "eskin-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None,
                    optimizer: dict[str, np.ndarray] | None = None) -> Path:
    """Write parameters, optional optimizer arrays and JSON metadata atomically."""
    path = Path(path)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "params": {k: [list(v.shape), str(v.dtype)] for k, v in params.items()},
        "meta": meta or {},
    }
    arrays = {f"param/{k}": v for k, v in params.items()}
    for k, v in (optimizer or {}).items():
        arrays[f"optim/{k}"] = v
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    """Return ``(params, meta, optimizer)``; rejects unknown formats and versions."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            if "__header__" not in z.files:
                raise CheckpointError(f"{path} is not a checkpoint (no header)")
            header = json.loads(bytes(z["__header__"]).decode())
            if header.get("format") != FORMAT:
                raise CheckpointError(f"{path}: unknown format {header.get('format')!r}")
            if header.get("version") != VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
            params = {k[6:]: z[k] for k in z.files if k.startswith("param/")}
            optim = {k[6:]: z[k] for k in z.files if k.startswith("optim/")}
    except (OSError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    for k, (shape, dtype) in header["params"].items():
        if k not in params or list(params[k].shape) != shape or str(params[k].dtype) != dtype:
            raise CheckpointError(f"{path}: parameter {k!r} does not match its header")
    return params, header["meta"], optim
