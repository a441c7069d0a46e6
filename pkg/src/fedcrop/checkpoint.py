"""FCROP1 checkpoints: JSON header with the layout, then little-endian float32 values.

A ``.json`` path stores the same content as a single JSON document, which is
handy for tiny models and fixtures.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .models import ModelSpec, ParameterVector

MAGIC = b"FCROP1"


def _header(vec: ParameterVector, metadata: Optional[dict]) -> dict:
    return {
        "magic": MAGIC.decode(),
        "layout": [[name, list(shape)] for name, shape in vec.layout],
        "spec": vec.spec.to_dict() if vec.spec is not None else None,
        "metadata": metadata or {},
    }


def save_checkpoint(path, vec: ParameterVector, metadata: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _header(vec, metadata)
    values = np.asarray(vec.values, dtype="<f4")
    if path.suffix == ".json":
        header["values"] = values.tolist()
        path.write_text(json.dumps(header))
        return path
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(values.tobytes())
    return path


def load_checkpoint(path) -> tuple:
    """Return ``(ParameterVector, metadata)``."""
    path = Path(path)
    if path.suffix == ".json":
        header = json.loads(path.read_text())
        if header.get("magic") != MAGIC.decode():
            raise ValueError(f"{path} is not an FCROP1 checkpoint")
        values = np.asarray(header.pop("values"), dtype=np.float32)
    else:
        raw = path.read_bytes()
        if raw[: len(MAGIC)] != MAGIC:
            raise ValueError(f"{path} is not an FCROP1 checkpoint")
        (n,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
        start = len(MAGIC) + 4
        header = json.loads(raw[start : start + n].decode())
        values = np.frombuffer(raw[start + n :], dtype="<f4").astype(np.float32)
    spec = ModelSpec(**header["spec"]) if header.get("spec") else None
    vec = ParameterVector(values, [(name, tuple(shape)) for name, shape in header["layout"]], spec)
    return vec, header.get("metadata", {})
