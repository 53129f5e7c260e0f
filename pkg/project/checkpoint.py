"""
The HEFT checkpoint container: a small little-endian binary file holding a JSON config
record and a table of named float64 tensors.

Layout:
    magic      4 bytes   b"HEFT"
    version    u32
    config     u32 length, then UTF-8 JSON
    count      u32 number of tensors
    per tensor u16 name length, UTF-8 name, u8 rank, rank x u64 dims,
               then prod(dims) row-major '<f8' values
"""

import io
import json
import logging
import math
import os
import struct
from pathlib import Path
from typing import Any, ClassVar, Literal, Mapping, Optional, Union

import numpy as np
from pydantic import BaseModel, Field

from project.errors import CheckpointFormatError
from project.lora import LoraConfig, LoraLayer, LoraModel
from project.reft import LoreftParams, ReftConfig, ReftModel, attach_intervention
from project.transformer import ModelConfig, ModelWeights

logger = logging.getLogger(__name__)

MAGIC = b"HEFT"
FORMAT_VERSION = 1
REFT_PREFIX = "reft."
LORA_PREFIX = "lora."


class _Layout:
    version: ClassVar[struct.Struct] = struct.Struct("<I")
    length: ClassVar[struct.Struct] = struct.Struct("<I")
    name_length: ClassVar[struct.Struct] = struct.Struct("<H")
    rank: ClassVar[struct.Struct] = struct.Struct("<B")
    dim: ClassVar[struct.Struct] = struct.Struct("<Q")


def _dump_tensors(handle: io.BufferedIOBase, config: Mapping[str, Any], tensors: Mapping[str, np.ndarray]):
    text = json.dumps(config, sort_keys=True).encode("utf-8")
    handle.write(MAGIC)
    handle.write(_Layout.version.pack(FORMAT_VERSION))
    handle.write(_Layout.length.pack(len(text)))
    handle.write(text)
    handle.write(_Layout.length.pack(len(tensors)))
    for name, value in tensors.items():
        encoded = name.encode("utf-8")
        array = np.ascontiguousarray(value, dtype="<f8")
        if len(encoded) > 0xFFFF or array.ndim > 0xFF:
            raise CheckpointFormatError(f"tensor {name!r} cannot be stored in the container")
        handle.write(_Layout.name_length.pack(len(encoded)))
        handle.write(encoded)
        handle.write(_Layout.rank.pack(array.ndim))
        for dim in array.shape:
            handle.write(_Layout.dim.pack(dim))
        handle.write(array.tobytes())


def save_checkpoint(
    path: Union[str, Path], config: Mapping[str, Any], tensors: Mapping[str, np.ndarray]
) -> None:
    """
    Writes the container atomically: the bytes go to a sibling temporary file that then
    replaces the target. A failed write removes the temporary file and leaves the target
    as it was.

    Args:
        path: Destination file.
        config: JSON-serializable config record stored verbatim.
        tensors: Named arrays; they are written as float64 in insertion order.
    """
    path = Path(path)
    scratch = path.with_name(path.name + ".tmp")
    try:
        with open(scratch, "wb") as handle:
            _dump_tensors(handle, config, tensors)
        os.replace(scratch, path)
    except BaseException:
        scratch.unlink(missing_ok=True)
        raise
    logger.info("Saved %d tensors to %s", len(tensors), path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, layout: struct.Struct, what: str) -> int:
        return layout.unpack(self.take(layout.size, what))[0]


def load_checkpoint(path: Union[str, Path]) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Reads a container back; every tensor comes back bit for bit."""
    with open(path, "rb") as handle:
        reader = _Reader(handle.read())

    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError(f"{path} is not a HEFT checkpoint (bad magic)")
    version = reader.unpack(_Layout.version, "version")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    config_text = reader.take(reader.unpack(_Layout.length, "config length"), "config")
    try:
        config = json.loads(config_text.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise CheckpointFormatError(f"unreadable config record: {error}") from error

    tensors: dict[str, np.ndarray] = {}
    for _ in range(reader.unpack(_Layout.length, "tensor count")):
        raw_name = reader.take(reader.unpack(_Layout.name_length, "name length"), "tensor name")
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError as error:
            raise CheckpointFormatError(f"tensor name {raw_name!r} is not UTF-8") from error
        if name in tensors:
            raise CheckpointFormatError(f"duplicate tensor name {name!r}")
        rank = reader.unpack(_Layout.rank, f"rank of {name}")
        shape = tuple(reader.unpack(_Layout.dim, f"dims of {name}") for _ in range(rank))
        # exact integer product: a crafted dims table must not wrap around
        payload = reader.take(math.prod(shape) * 8, f"data of {name}")
        try:
            values = np.frombuffer(payload, dtype="<f8").reshape(shape)
        except (ValueError, OverflowError) as error:
            raise CheckpointFormatError(f"tensor {name!r} has unusable dims {list(shape)}") from error
        tensors[name] = values.astype(np.float64)
    if reader.offset != len(reader.data):
        raise CheckpointFormatError(f"{len(reader.data) - reader.offset} trailing bytes after tensor table")
    return config, tensors


class CheckpointConfig(BaseModel):
    """
    The config record written into every checkpoint. "model" checkpoints hold only base
    weights; "lora" checkpoints add unmerged adapter pairs; "heft" checkpoints add a
    resolved intervention config and its tensors.
    """

    kind: Literal["model", "lora", "heft"]
    model: ModelConfig
    lora: Optional[LoraConfig] = None
    reft: Optional[ReftConfig] = None
    run: dict[str, Any] = Field(default_factory=dict)


def save_model(path: Union[str, Path], weights: ModelWeights, run: Optional[Mapping[str, Any]] = None) -> None:
    config = CheckpointConfig(kind="model", model=weights.config, run=dict(run or {}))
    save_checkpoint(path, config.model_dump(mode="json"), {n: weights[n] for n in weights.names()})


def save_heft(path: Union[str, Path], intervention: ReftModel, run: Optional[Mapping[str, Any]] = None) -> None:
    """Merged base weights plus the trained R, W and b under the reft. prefix."""
    base = intervention.base
    config = CheckpointConfig(kind="heft", model=base.config, reft=intervention.config, run=dict(run or {}))
    tensors = {n: base[n] for n in base.names()}
    tensors.update(intervention.trainable_parameters())
    save_checkpoint(path, config.model_dump(mode="json"), tensors)


def save_lora(path: Union[str, Path], model: LoraModel, run: Optional[Mapping[str, Any]] = None) -> None:
    """Frozen base weights plus every adapter pair as lora.<target>.A / lora.<target>.B."""
    base = model.base
    config = CheckpointConfig(kind="lora", model=base.config, lora=model.config, run=dict(run or {}))
    tensors = {n: base[n] for n in base.names()}
    tensors.update(model.trainable_parameters())
    save_checkpoint(path, config.model_dump(mode="json"), tensors)


def _load_lora_layers(tensors: Mapping[str, np.ndarray]) -> dict[str, LoraLayer]:
    targets = sorted({n[len(LORA_PREFIX) :].rsplit(".", 1)[0] for n in tensors if n.startswith(LORA_PREFIX)})
    layers = {}
    for target in targets:
        try:
            A, B = tensors[f"lora.{target}.A"], tensors[f"lora.{target}.B"]
        except KeyError as error:
            raise CheckpointFormatError(f"lora checkpoint is missing tensor {error.args[0]}") from error
        layers[target] = LoraLayer(target_name=target, A=A, B=B)
    return layers


def load_model(path: Union[str, Path]) -> tuple[Union[ModelWeights, LoraModel, ReftModel], CheckpointConfig]:
    """
    Rebuilds what a checkpoint holds: plain weights for "model", the base with its
    adapters for "lora", and the merged base with its intervention attached for "heft".
    """
    raw, tensors = load_checkpoint(path)
    config = CheckpointConfig.model_validate(raw)
    weight_tensors = {n: t for n, t in tensors.items() if not n.startswith((REFT_PREFIX, LORA_PREFIX))}
    weights = ModelWeights(config.model, weight_tensors)
    if config.kind == "model":
        return weights, config
    if config.kind == "lora":
        if config.lora is None:
            raise CheckpointFormatError("lora checkpoint without an adapter config")
        return LoraModel(base=weights, layers=_load_lora_layers(tensors), config=config.lora), config
    if config.reft is None:
        raise CheckpointFormatError("heft checkpoint without an intervention config")
    try:
        params = LoreftParams(R=tensors["reft.R"], W=tensors["reft.W"], b=tensors["reft.b"])
    except KeyError as error:
        raise CheckpointFormatError(f"heft checkpoint is missing tensor {error.args[0]}") from error
    return attach_intervention(weights, config.reft, params), config
