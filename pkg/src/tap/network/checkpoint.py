"""Single-file checkpoint format: JSON config header + named binary blobs.

Layout (little-endian, see docs/formats.md):

    magic    8 bytes b"TAPCKPT1"
    u32      header length
    header   UTF-8 JSON: format_version, model_config, train_config,
             config_hash, extra, and a blob directory [{name, dtype, shape,
             crc32}] in payload order
    blobs    raw values back to back, f32/f16/i64/u8 little-endian

Model parameters are stored as 32-bit floats; optimizer moments, step
counters and RNG streams ride along as extra blobs so training can resume
bit-exactly.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..config import ModelConfig, TrainConfig

MAGIC = b"TAPCKPT1"
_DTYPES = {"f32": np.float32, "f16": np.float16, "i64": np.int64, "u8": np.uint8}
_DTYPE_NAMES = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, model_cfg: ModelConfig,
                    blobs: dict[str, np.ndarray], train_cfg: TrainConfig | None = None,
                    config_hash: str = "", extra: dict | None = None) -> None:
    directory = []
    payloads = []
    for name, arr in blobs.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_NAMES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for blob {name!r}")
        raw = arr.tobytes()
        directory.append(
            {
                "name": name,
                "dtype": _DTYPE_NAMES[arr.dtype],
                "shape": list(arr.shape),
                "crc32": zlib.crc32(raw),
            }
        )
        payloads.append(raw)
    header = {
        "format_version": 1,
        "model_config": asdict(model_cfg),
        "train_config": asdict(train_cfg) if train_cfg is not None else None,
        "config_hash": config_hash,
        "extra": extra or {},
        "blobs": directory,
    }
    encoded = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(encoded)))
        f.write(encoded)
        for raw in payloads:
            f.write(raw)


class Checkpoint:
    def __init__(self, header: dict, blobs: dict[str, np.ndarray]):
        self.header = header
        self.blobs = blobs

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.header["model_config"])

    @property
    def train_config(self) -> TrainConfig | None:
        raw = self.header["train_config"]
        return TrainConfig(**raw) if raw is not None else None

    @property
    def extra(self) -> dict:
        return self.header["extra"]

    @property
    def config_hash(self) -> str:
        return self.header["config_hash"]


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        blobs = {}
        for entry in header["blobs"]:
            dtype = _DTYPES[entry["dtype"]]
            count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
            raw = f.read(count * np.dtype(dtype).itemsize)
            if zlib.crc32(raw) != entry["crc32"]:
                raise CheckpointError(f"{path}: blob {entry['name']!r} failed its checksum")
            blobs[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
    return Checkpoint(header, blobs)


def model_blobs(model, prefix: str = "model.") -> dict[str, np.ndarray]:
    """Named parameter and persistent-buffer blobs as float32 arrays."""
    out = {}
    for name, tensor in model.state_dict().items():
        out[prefix + name] = tensor.detach().cpu().numpy().astype(np.float32)
    return out


def load_model_blobs(model, blobs: dict[str, np.ndarray], prefix: str = "model.") -> None:
    import torch

    state = {}
    for name, arr in blobs.items():
        if name.startswith(prefix):
            state[name[len(prefix):]] = torch.from_numpy(np.ascontiguousarray(arr))
    missing, unexpected = model.load_state_dict(state, strict=True), None
    del missing, unexpected
