"""JSON parameter checkpoints.

Format: ``{"version": 1, "params": {name: {"shape": [...], "data": [...]}}}``
with row-major data. An optional ``"meta"`` object carries model
configuration and auxiliary tables.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def to_dict(params: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> dict:
    out: dict[str, Any] = {"version": CHECKPOINT_VERSION, "params": {}}
    for name, arr in params.items():
        a = np.asarray(arr, dtype=np.float64)
        out["params"][name] = {"shape": list(a.shape), "data": a.reshape(-1).tolist()}
    if meta is not None:
        out["meta"] = dict(meta)
    return out


def from_dict(obj: Mapping[str, Any]) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if obj.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {obj.get('version')!r}")
    params = {}
    for name, entry in obj["params"].items():
        shape = tuple(int(s) for s in entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"parameter {name!r}: {data.size} values for shape {shape}")
        params[name] = data.reshape(shape)
    return params, dict(obj.get("meta", {}))


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, params: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    atomic_write_text(path, json.dumps(to_dict(params, meta)))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    return from_dict(obj)
