"""Checkpoint files: a length-prefixed JSON manifest followed by a float32 blob.

Layout: 8-byte little-endian manifest length, the UTF-8 JSON manifest
(sorted keys, compact separators), then every tensor as little-endian
float32 in manifest order. Offsets are relative to the blob start and
partition it exactly.
"""

import json
import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from .camc import CamcBlock
from .models import CamcVariant, FormatError, HeadKind, InvalidArgumentError, Stage
from .network import Backbone, ClassifierHead
from .pipeline import Model
from .tensor import Tensor, parameter

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
HEADER = struct.Struct("<Q")
TENSOR_NAME = re.compile(
    r"^(backbone\.stage\d+\.(weight|bias)"
    r"|head\.(weight|bias|g)"
    r"|camc\.prototypes\.\d+"
    r"|camc\.fusion\.(weight|bias))$"
)


@dataclass
class Checkpoint:
    """Named float32 tensors plus the run that produced them."""
    tensors: Dict[str, np.ndarray]
    stage: str
    epoch: int = 0
    seed: int = 0
    config: Dict[str, Any] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    def names(self):
        return list(self.tensors)

    def backbone_tensors(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith("backbone.")}


def save_checkpoint(checkpoint: Checkpoint) -> bytes:
    """Serialize to bytes; identical checkpoints give identical bytes."""
    entries = []
    blobs = []
    offset = 0
    for name, array in checkpoint.tensors.items():
        if not TENSOR_NAME.match(name):
            raise InvalidArgumentError(f"unknown tensor name {name!r}")
        data = np.ascontiguousarray(array, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(array)), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "stage": checkpoint.stage,
        "epoch": checkpoint.epoch,
        "seed": checkpoint.seed,
        "config": checkpoint.config,
        "meta": checkpoint.meta,
        "tensors": entries,
    }
    encoded = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return HEADER.pack(len(encoded)) + encoded + b"".join(blobs)


def load_checkpoint(raw: bytes) -> Checkpoint:
    """Parse checkpoint bytes.

    Raises:
        FormatError: On a bad header, manifest, version, tensor name or blob
            length, naming the first offending byte offset
    """
    if len(raw) < HEADER.size:
        raise FormatError("checkpoint shorter than its 8-byte header", offset=0)
    (length,) = HEADER.unpack_from(raw, 0)
    start = HEADER.size + length
    if start > len(raw):
        raise FormatError(f"manifest length {length} runs past the end of the file", offset=HEADER.size)
    try:
        manifest = json.loads(raw[HEADER.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable manifest ({e})", offset=HEADER.size)
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise FormatError(
            f"checkpoint version {manifest.get('version')!r}, expected {CHECKPOINT_VERSION}",
            offset=HEADER.size,
        )

    blob = memoryview(raw)[start:]
    tensors: Dict[str, np.ndarray] = {}
    expected = 0
    for entry in manifest.get("tensors", []):
        name = entry["name"]
        if not TENSOR_NAME.match(name):
            raise FormatError(f"unknown tensor name {name!r}", offset=HEADER.size)
        shape = tuple(int(d) for d in entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if entry["offset"] != expected or entry["nbytes"] != nbytes:
            raise FormatError(f"tensor {name} does not continue the blob partition", offset=start + expected)
        if expected + nbytes > len(blob):
            raise FormatError(
                f"blob truncated inside tensor {name}: {len(blob) - expected} of {nbytes} bytes",
                offset=start + expected,
            )
        tensors[name] = (
            np.frombuffer(blob[expected:expected + nbytes], dtype="<f4").astype(np.float32).reshape(shape)
        )
        expected += nbytes
    if expected != len(blob):
        raise FormatError(f"{len(blob) - expected} trailing bytes after the last tensor", offset=start + expected)
    return Checkpoint(
        tensors=tensors,
        stage=manifest["stage"],
        epoch=int(manifest["epoch"]),
        seed=int(manifest["seed"]),
        config=manifest.get("config", {}),
        meta=manifest.get("meta", {}),
    )


def write_checkpoint(checkpoint: Checkpoint, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(save_checkpoint(checkpoint))
    return path


def read_checkpoint(path: Path) -> Checkpoint:
    return load_checkpoint(Path(path).read_bytes())


# Models


def model_to_checkpoint(
    model: Model,
    epoch: int,
    seed: int,
    config: Optional[Dict[str, Any]] = None,
    meta: Optional[Dict[str, Any]] = None,
) -> Checkpoint:
    """Snapshot a model; the meta section records what model_from_checkpoint needs."""
    head = model.head
    described = {
        "head_kind": head.kind.value,
        "g": None if isinstance(head.g, Tensor) else head.g,
        "num_classes": head.num_classes,
        "variant": model.variant.value,
        "m": model.m,
        "channels": [w.shape[0] for w in model.backbone.weights],
        "in_channels": model.backbone.in_channels,
    }
    if model.camc is not None:
        described.update({"k": model.camc.k, "tail_classes": model.camc.tail_classes})
    described.update(meta or {})
    return Checkpoint(
        tensors=model.state_dict(),
        stage=model.stage.value,
        epoch=epoch,
        seed=seed,
        config=config or {},
        meta=described,
    )


def backbone_from_checkpoint(checkpoint: Checkpoint) -> Backbone:
    """Backbone tensors matched by name; stages are numbered from 1."""
    tensors = checkpoint.tensors
    weights, biases = [], []
    stage = 1
    while f"backbone.stage{stage}.weight" in tensors:
        weights.append(parameter(tensors[f"backbone.stage{stage}.weight"]))
        biases.append(parameter(tensors[f"backbone.stage{stage}.bias"]))
        stage += 1
    if not weights:
        raise FormatError("checkpoint has no backbone tensors")
    return Backbone(weights, biases)


def head_from_checkpoint(checkpoint: Checkpoint) -> ClassifierHead:
    tensors = checkpoint.tensors
    kind = HeadKind(checkpoint.meta["head_kind"])
    if "head.weight" not in tensors:
        raise FormatError("checkpoint has no head.weight tensor")
    head = ClassifierHead.with_weight(kind, parameter(tensors["head.weight"]), checkpoint.meta.get("g") or 1.0)
    if head.bias is not None:
        head.bias = parameter(tensors["head.bias"])
    if "head.g" in tensors:
        head.g = parameter(tensors["head.g"])
    return head


def camc_from_checkpoint(checkpoint: Checkpoint) -> Optional[CamcBlock]:
    tensors = checkpoint.tensors
    if "camc.fusion.weight" not in tensors:
        return None
    prefix = "camc.prototypes."
    prototypes = {
        int(name[len(prefix):]): parameter(array)
        for name, array in tensors.items()
        if name.startswith(prefix)
    }
    tau = checkpoint.meta.get("tau")
    return CamcBlock(
        prototypes,
        parameter(tensors["camc.fusion.weight"]),
        parameter(tensors["camc.fusion.bias"]),
        float("inf") if tau in ("inf", None) else float(tau),
        int(checkpoint.meta.get("k", tensors["camc.fusion.weight"].shape[1])),
    )


def model_from_checkpoint(checkpoint: Checkpoint) -> Model:
    """Rebuild the model a checkpoint was taken from."""
    camc = camc_from_checkpoint(checkpoint)
    variant = CamcVariant(checkpoint.meta.get("variant", "none"))
    if camc is None:
        variant = CamcVariant.NONE
    return Model(
        backbone_from_checkpoint(checkpoint),
        head_from_checkpoint(checkpoint),
        Stage(checkpoint.stage),
        camc=camc,
        variant=variant,
        m=int(checkpoint.meta.get("m", 2)),
    )
