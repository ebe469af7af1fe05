"""Binary tensor files and checkpoint directories.

Tensor file layout: magic b"BCKM", version u32, rank u32, dims u32*rank,
then the payload as little-endian float32 in row-major order. A checkpoint
is a directory of such files plus manifest.json mapping name -> file ->
shape, with any extra metadata (config, step, frozen flag) alongside.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Array

MAGIC = b"BCKM"
VERSION = 1


def write_tensor(path: str | Path, arr: Array) -> None:
    arr = np.asarray(arr)
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_tensor(path: str | Path) -> Array:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    dims = struct.unpack_from(f"<{rank}I", raw, 12)
    data = np.frombuffer(raw, dtype="<f4", offset=12 + 4 * rank)
    expected = int(np.prod(dims)) if rank else 1
    if data.size != expected:
        raise ValueError(f"{path}: payload holds {data.size} floats, header says {expected}")
    return data.reshape(dims).copy()


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def save_checkpoint(ckpt_dir: str | Path, tensors: dict[str, Array],
                    extra: dict | None = None) -> None:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in tensors.items():
        fname = name.replace("/", "_") + ".bckm"
        write_tensor(ckpt_dir / fname, arr)
        entries[name] = {"file": fname, "shape": list(np.asarray(arr).shape)}
    manifest = {"format": "beamckm-checkpoint", "version": VERSION, "tensors": entries}
    if extra:
        manifest.update(extra)
    (ckpt_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(ckpt_dir: str | Path) -> tuple[dict[str, Array], dict]:
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / "manifest.json").read_text())
    tensors = {}
    for name, entry in manifest["tensors"].items():
        arr = read_tensor(ckpt_dir / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"{name}: stored shape {arr.shape} != manifest {entry['shape']}")
        tensors[name] = arr
    return tensors, manifest
