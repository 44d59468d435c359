"""Named-tensor checkpoints: ``manifest.json`` plus one raw float32 file per array.

The manifest records the config, step, RNG state and an index mapping each
array name to its file, shape and checksum. Writes go to a temporary
directory first and are renamed into place, so a crash never leaves a
half-written checkpoint behind.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

MANIFEST = "manifest.json"
FORMAT_VERSION = 1


def _file_name(name: str) -> str:
    return name.replace("/", "__") + ".f32"


def save_arrays(path: str | os.PathLike, arrays: Mapping[str, np.ndarray | torch.Tensor],
                meta: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    index = {}
    for name in sorted(arrays):
        value = arrays[name]
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().to(torch.float64).numpy()
        data = np.ascontiguousarray(value, dtype="<f4")
        blob = data.tobytes()
        fname = _file_name(name)
        (tmp / fname).write_bytes(blob)
        index[name] = {"file": fname, "shape": list(data.shape),
                       "sha256": hashlib.sha256(blob).hexdigest()}
    manifest = {"format": FORMAT_VERSION, "arrays": index, **(meta or {})}
    (tmp / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    if path.exists():
        old = path.with_name(path.name + ".old")
        if old.exists():
            shutil.rmtree(old)
        path.rename(old)
        tmp.rename(path)
        shutil.rmtree(old)
    else:
        tmp.rename(path)
    return path


def load_arrays(path: str | os.PathLike, verify: bool = True) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text())
    arrays = {}
    for name, entry in manifest["arrays"].items():
        blob = (path / entry["file"]).read_bytes()
        if verify and hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise ValueError(f"checksum mismatch for {name} in {path}")
        arrays[name] = np.frombuffer(blob, dtype="<f4").reshape(entry["shape"]).copy()
    meta = {k: v for k, v in manifest.items() if k != "arrays"}
    return arrays, meta


def save_model(path, model: torch.nn.Module, config: Mapping[str, Any], step: int = 0,
               rng_state: Any = None, extra: Mapping[str, Any] | None = None,
               extra_arrays: Mapping[str, np.ndarray | torch.Tensor] | None = None) -> Path:
    arrays: dict[str, Any] = {f"model/{k}": v for k, v in model.state_dict().items()}
    for k, v in (extra_arrays or {}).items():
        arrays[k] = v
    meta = {"config": dict(config), "step": int(step), "rng_state": rng_state, **(extra or {})}
    return save_arrays(path, arrays, meta)


def load_state_dict(arrays: Mapping[str, np.ndarray], prefix: str = "model/",
                    dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
    return {k[len(prefix):]: torch.from_numpy(v).to(dtype)
            for k, v in arrays.items() if k.startswith(prefix)}
