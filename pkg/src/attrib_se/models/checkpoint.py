"""Single-file checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
header, then a raw little-endian float32 payload.  The header manifest
lists tensor names and shapes in payload order, so save(load(p)) writes a
byte-identical file.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"ATSECKP1"


class CheckpointError(ValueError):
    """Raised for malformed or mismatched checkpoint files."""


@dataclass
class Checkpoint:
    kind: str  # "bsrnn" | "sgmse"
    config: dict
    step: int
    seed_lineage: list[int]
    tensors: dict[str, np.ndarray]
    optimizer_tensors: dict[str, np.ndarray] | None = None
    optimizer_meta: dict | None = None

    def __post_init__(self):
        for name, arr in self.tensors.items():
            if arr.dtype != np.float32:
                raise CheckpointError(f"tensor {name!r} is {arr.dtype}, not float32")


def _manifest(tensors: dict[str, np.ndarray]) -> list[dict]:
    return [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "kind": ckpt.kind,
        "config": ckpt.config,
        "step": ckpt.step,
        "seed_lineage": ckpt.seed_lineage,
        "tensors": _manifest(ckpt.tensors),
        "optimizer_tensors": (
            _manifest(ckpt.optimizer_tensors) if ckpt.optimizer_tensors else None
        ),
        "optimizer_meta": ckpt.optimizer_meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.parent / f".{path.name}.tmp"
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in ckpt.tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        if ckpt.optimizer_tensors:
            for arr in ckpt.optimizer_tensors.values():
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with path.open("rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()

    def take(manifest: list[dict], offset: int):
        out = {}
        for entry in manifest:
            shape = tuple(entry["shape"])
            numel = int(np.prod(shape)) if shape else 1
            raw = payload[offset : offset + 4 * numel]
            if len(raw) != 4 * numel:
                raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
            out[entry["name"]] = (
                np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            )
            offset += 4 * numel
        return out, offset

    tensors, offset = take(header["tensors"], 0)
    opt_tensors = None
    if header.get("optimizer_tensors"):
        opt_tensors, offset = take(header["optimizer_tensors"], offset)
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing bytes")
    return Checkpoint(
        kind=header["kind"],
        config=header["config"],
        step=header["step"],
        seed_lineage=header["seed_lineage"],
        tensors=tensors,
        optimizer_tensors=opt_tensors,
        optimizer_meta=header.get("optimizer_meta"),
    )


def state_dict_to_numpy(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {
        name: t.detach().cpu().numpy().astype(np.float32)
        for name, t in module.state_dict().items()
    }


def load_state_from_numpy(module: torch.nn.Module, tensors: dict[str, np.ndarray]):
    state = {name: torch.from_numpy(arr.copy()) for name, arr in tensors.items()}
    module.load_state_dict(state, strict=True)
