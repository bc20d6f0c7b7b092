"""Flat binary checkpoint container.

Layout: one magic line, one JSON header line (metadata plus an ordered list
of parameter names and shapes), then the raw little-endian float64 payload
of every parameter concatenated in header order. The payload is written
with ``tobytes()`` so a save/load round trip is bit-exact and repeated
saves of identical parameters are byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError

MAGIC = b"MEDCODER-CKPT-1\n"


def save_checkpoint(path, params: dict, metadata: dict | None = None) -> None:
    """params maps name -> Tensor or ndarray; metadata must be JSON-safe."""
    entries = []
    payloads = []
    for name, value in params.items():
        arr = value.values if isinstance(value, Tensor) else np.asarray(value)
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape)})
        payloads.append(arr.tobytes())
    header = json.dumps(
        {"metadata": metadata or {}, "params": entries}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header)
        fh.write(b"\n")
        for chunk in payloads:
            fh.write(chunk)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (name -> float64 ndarray, metadata)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ConfigError(f"not a checkpoint file: {path}")
        header = json.loads(fh.readline().decode("utf-8"))
        params: dict[str, np.ndarray] = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ConfigError(f"truncated checkpoint payload: {path}")
            params[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return params, header["metadata"]
