"""On-disk checkpoint directories.

Layout::

    <dir>/spec.txt       key = value lines describing the model
    <dir>/params/*.bin   one tensor per file: magic, ndim, dims, little-endian float32 data
    <dir>/manifest.txt   "<name>\t<file>\t<sha256>" per tensor
"""
from __future__ import annotations

import hashlib
import os
import struct

import numpy as np
import torch

from .errors import CheckpointCorrupt

MAGIC = b"TSCLPRM1"


def write_kv(path, values: dict) -> None:
    with open(path, "w") as fh:
        for key, val in values.items():
            fh.write(f"{key} = {val}\n")


def read_kv(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            out[key.strip()] = val.strip()
    return out


def _tensor_bytes(tensor: torch.Tensor) -> bytes:
    arr = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def _parse_tensor(blob: bytes) -> torch.Tensor:
    if blob[:8] != MAGIC:
        raise CheckpointCorrupt("bad tensor file magic")
    (ndim,) = struct.unpack_from("<I", blob, 8)
    shape = struct.unpack_from(f"<{ndim}Q", blob, 12)
    offset = 12 + 8 * ndim
    arr = np.frombuffer(blob, dtype="<f4", offset=offset)
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointCorrupt(f"tensor payload has {arr.size} values, header says {shape}")
    return torch.from_numpy(arr.reshape(shape).astype(np.float32))


def save_state(state: dict, spec: dict, path) -> None:
    os.makedirs(os.path.join(path, "params"), exist_ok=True)
    write_kv(os.path.join(path, "spec.txt"), spec)
    lines = []
    for name, tensor in state.items():
        fname = f"{name}.bin"
        blob = _tensor_bytes(tensor)
        with open(os.path.join(path, "params", fname), "wb") as fh:
            fh.write(blob)
        lines.append(f"{name}\t{fname}\t{hashlib.sha256(blob).hexdigest()}")
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_state(path) -> tuple[dict, dict]:
    """Return (state_dict, spec) after verifying every tensor's hash."""
    spec = read_kv(os.path.join(path, "spec.txt"))
    state = {}
    with open(os.path.join(path, "manifest.txt")) as fh:
        for line in fh:
            if not line.strip():
                continue
            name, fname, digest = line.rstrip("\n").split("\t")
            with open(os.path.join(path, "params", fname), "rb") as tf:
                blob = tf.read()
            if hashlib.sha256(blob).hexdigest() != digest:
                raise CheckpointCorrupt(f"hash mismatch for {name}")
            state[name] = _parse_tensor(blob)
    return state, spec


def state_checksum(module: torch.nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
