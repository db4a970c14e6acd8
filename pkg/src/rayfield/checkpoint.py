"""Single-file checkpoint container with a bit-exact round trip.

Layout (all integers little-endian)::

    bytes 0..3    magic b"RFCK"
    bytes 4..7    format version (uint32)
    bytes 8..15   manifest length in bytes (uint64)
    manifest      UTF-8 JSON: training config, iteration, pose count and a
                  tensor table [{name, dtype, shape, offset, nbytes}, ...]
    data          raw little-endian tensor bytes, in table order

Tensors cover the full training state dict (hash tables, network weights and
buffers, density slope, per-view pose parameters), so ``load`` reproduces
every parameter bit for bit.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .geometry import PoseParam
from .fieldvol import FeatureVolume
from .nets import FieldModel
from .pipeline import TrainConfig, TrainState, config_from_dict, config_to_dict

MAGIC = b"RFCK"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, state: TrainState, cfg: TrainConfig) -> None:
    table = []
    blobs = []
    offset = 0
    for name, tensor in state.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        code = _DTYPES.get(tensor.dtype)
        if code is None:
            raise CheckpointError(f"unsupported tensor dtype {tensor.dtype} for '{name}'")
        raw = np.ascontiguousarray(arr).astype(code, copy=False).tobytes()
        table.append(
            {
                "name": name,
                "dtype": code,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "iteration": state.iteration,
        "n_poses": len(state.poses),
        "config": config_to_dict(cfg),
        "tensors": table,
    }
    mbytes = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(mbytes)))
        f.write(mbytes)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path: str | Path) -> tuple[TrainState, TrainConfig]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    version = struct.unpack("<I", data[4:8])[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    mlen = struct.unpack("<Q", data[8:16])[0]
    manifest = json.loads(data[16 : 16 + mlen].decode("utf-8"))
    base = 16 + mlen

    cfg = config_from_dict(manifest["config"])
    volume = FeatureVolume(cfg.grid, dtype=cfg.torch_dtype)
    model = FieldModel(volume, cfg.mask, cfg.field, dtype=cfg.torch_dtype)
    poses = [
        PoseParam((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 0.0))
        for _ in range(manifest["n_poses"])
    ]
    state = TrainState(model, poses)

    tensors = {}
    for entry in manifest["tensors"]:
        start = base + entry["offset"]
        raw = data[start : start + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(
            arr.astype(entry["dtype"].replace("<", "="), copy=True)
        )
    missing, unexpected = state.load_state_dict(tensors, strict=False)
    if missing or unexpected:
        raise CheckpointError(
            f"checkpoint does not match the rebuilt state (missing={missing}, "
            f"unexpected={unexpected})"
        )
    state.iteration = manifest["iteration"]
    return state, cfg
