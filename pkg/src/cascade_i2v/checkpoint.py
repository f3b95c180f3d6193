"""Single-file checkpoint: a JSON text header followed by a raw float32 payload.

Layout::

    CASCADE-CKPT <version>\\n
    <header byte length>\\n
    <header JSON (utf-8)>
    <payload: little-endian float32 tensors, contiguous, in directory order>

The header holds the stage tag, config snapshot, seed lineage, optional extras
(e.g. loss curves) and the tensor directory ``name -> dtype/shape/offset/nbytes``.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = "CASCADE-CKPT"
FORMAT_VERSION = 1
STAGES = ("autoencoder", "base", "refine")


@dataclass
class Checkpoint:
    stage: str
    tensors: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CheckpointError(f"unknown stage tag {self.stage!r}; expected one of {STAGES}")

    def require_stage(self, *stages: str) -> "Checkpoint":
        if self.stage not in stages:
            raise CheckpointError(
                f"checkpoint has stage {self.stage!r} but {' or '.join(stages)!r} is required")
        return self

    def subset(self, prefix: str) -> "OrderedDict[str, torch.Tensor]":
        """Tensors under ``prefix.`` with the prefix stripped."""
        n = len(prefix) + 1
        return OrderedDict((k[n:], v) for k, v in self.tensors.items() if k.startswith(prefix + "."))

    def save(self, path) -> Path:
        return save_checkpoint(self, path)


def state_to_tensors(prefix: str, module: torch.nn.Module) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((f"{prefix}.{k}", v.detach().clone()) for k, v in module.state_dict().items())


def load_into(module: torch.nn.Module, tensors, what: str = "module") -> None:
    """Load a state dict, turning missing or misshaped tensors into CheckpointError."""
    expected = module.state_dict()
    missing = [k for k in expected if k not in tensors]
    if missing:
        raise CheckpointError(f"{what}: checkpoint is missing tensors {missing[:5]}")
    for k, v in expected.items():
        if tuple(tensors[k].shape) != tuple(v.shape):
            raise CheckpointError(
                f"{what}: tensor {k!r} has shape {tuple(tensors[k].shape)}, model expects {tuple(v.shape)}")
    module.load_state_dict({k: tensors[k] for k in expected})


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    directory, blobs, offset = [], [], 0
    for name, tensor in ckpt.tensors.items():
        if not torch.is_floating_point(tensor):
            raise CheckpointError(f"tensor {name!r} has non-float dtype {tensor.dtype}")
        arr = tensor.detach().cpu().numpy().astype("<f4", order="C")
        blob = arr.tobytes()
        directory.append({"name": name, "dtype": "float32", "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {"format_version": FORMAT_VERSION, "stage": ckpt.stage, "config": ckpt.config,
              "seeds": ckpt.seeds, "extras": ckpt.extras, "tensors": directory}
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {FORMAT_VERSION}\n{len(head)}\n".encode("ascii"))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path, expect_stage: str | tuple[str, ...] | None = None) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        first = raw.index(b"\n")
        second = raw.index(b"\n", first + 1)
        magic, version = raw[:first].decode("ascii").split()
        if magic != MAGIC:
            raise ValueError("bad magic")
        if int(version) != FORMAT_VERSION:
            raise ValueError(f"unsupported format version {version}")
        hlen = int(raw[first + 1:second])
        header = json.loads(raw[second + 1:second + 1 + hlen].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}: {exc}") from exc
    entry_keys = {"name", "shape", "dtype", "offset", "nbytes"}
    if (not isinstance(header, dict) or "stage" not in header
            or not all(isinstance(e, dict) and entry_keys <= e.keys() for e in header.get("tensors", []))):
        raise CheckpointError(f"checkpoint header in {path} lacks required fields")
    payload = memoryview(raw)[second + 1 + hlen:]
    tensors, expected_offset = OrderedDict(), 0
    for entry in header.get("tensors", []):
        off, nbytes = entry["offset"], entry["nbytes"]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if off != expected_offset or nbytes != 4 * count or entry["dtype"] != "float32":
            raise CheckpointError(f"corrupt tensor directory entry {entry['name']!r} in {path}")
        expected_offset += nbytes
        if expected_offset > len(payload):
            raise CheckpointError(
                f"checkpoint {path} is truncated: tensor {entry['name']!r} runs past the payload")
        arr = np.frombuffer(payload[off:off + nbytes], dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    if expected_offset != len(payload):
        raise CheckpointError(
            f"payload of {path} is {len(payload)} bytes, directory declares {expected_offset}")
    ckpt = Checkpoint(header["stage"], tensors, header.get("config", {}),
                      header.get("seeds", {}), header.get("extras", {}))
    if expect_stage is not None:
        stages = (expect_stage,) if isinstance(expect_stage, str) else tuple(expect_stage)
        ckpt.require_stage(*stages)
    return ckpt
