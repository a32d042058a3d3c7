"""Versioned checkpoint container: named tensors plus a JSON meta block.

Layout: magic, u32 header length, canonical JSON header (version, meta,
tensor index with name/shape/dtype/offset), then the raw little-endian
tensor bytes. Writes are atomic (tmp file + rename) and byte-deterministic,
so save -> load -> save reproduces identical files.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DCCKPT1\n"
VERSION = 1


def _to_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    arr = np.asarray(t)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(_to_numpy(tensors[name]))
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape),
                      "dtype": arr.dtype.str, "offset": offset,
                      "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": VERSION, "meta": meta or {},
                         "tensors": index},
                        sort_keys=True, separators=(",", ":")).encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            for raw in blobs:
                f.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen))
        if header["version"] != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version "
                             f"{header['version']}")
        base = f.tell()
        data = f.read()
    tensors = {}
    for entry in header["tensors"]:
        raw = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, header["meta"]


def state_dict_tensors(module: torch.nn.Module, prefix: str = "") -> dict:
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_into_module(module: torch.nn.Module, tensors: dict,
                     prefix: str = "") -> None:
    """Load named arrays into a module, reporting the offending parameter on
    any shape or missing-key mismatch."""
    state = module.state_dict()
    new_state = {}
    for key, ref in state.items():
        name = prefix + key
        if name not in tensors:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        arr = tensors[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise ValueError(
                f"checkpoint parameter {name!r} has shape {tuple(arr.shape)}, "
                f"model expects {tuple(ref.shape)}")
        new_state[key] = torch.from_numpy(np.ascontiguousarray(arr)).to(ref.dtype)
    module.load_state_dict(new_state)
