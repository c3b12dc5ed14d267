"""Checkpoint archive: named tensors as raw little-endian float64 plus metadata.

The archive is a zip with three kinds of members:

* ``meta.json``  - free-form metadata (config, seed, step, ...)
* ``index.json`` - ordered ``name -> {"shape": [...], "dtype": "<f8"}``
* ``tensors/<name>.bin`` - the raw buffer for each name

Member timestamps are pinned so identical contents give identical bytes.
"""

import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, tensors, meta):
    """Write ``tensors`` (name -> tensor/array) and ``meta`` (JSON-able dict)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = {}
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        for name, value in tensors.items():
            if torch.is_tensor(value):
                value = value.detach().cpu().numpy()
            arr = np.ascontiguousarray(value, dtype="<f8")
            index[name] = {"shape": list(arr.shape), "dtype": "<f8"}
            _member(zf, f"tensors/{name}.bin", arr.tobytes())
        _member(zf, "index.json", json.dumps(index, indent=1))
        _member(zf, "meta.json", json.dumps(meta, indent=1, sort_keys=True))
    tmp.replace(path)
    return path


def load_checkpoint(path):
    """Return ``(tensors, meta)`` with tensors as float64 ``torch.Tensor``."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            index = json.loads(zf.read("index.json"))
            meta = json.loads(zf.read("meta.json"))
            tensors = {}
            for name, info in index.items():
                buf = zf.read(f"tensors/{name}.bin")
                arr = np.frombuffer(buf, dtype="<f8")
                shape = tuple(info["shape"])
                if arr.size != int(np.prod(shape, dtype=np.int64)):
                    raise CheckpointError(f"{name}: buffer size does not match shape {shape}")
                tensors[name] = torch.from_numpy(arr.reshape(shape).copy())
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    return tensors, meta


def flatten_state(prefix, state_dict):
    return {f"{prefix}.{k}": v for k, v in state_dict.items()}


def unflatten_state(prefix, tensors, like):
    """Pick ``prefix.*`` entries and cast them to the dtypes of ``like`` (a state dict)."""
    out = {}
    for key, ref in like.items():
        full = f"{prefix}.{key}"
        if full not in tensors:
            raise CheckpointError(f"missing tensor {full}")
        out[key] = tensors[full].to(ref.dtype).reshape(ref.shape)
    return out
