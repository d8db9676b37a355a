"""
Named-tensor checkpoints.

Layout (little-endian)::

    b"SAVC1"                magic
    u16                     format version (1)
    32 bytes                SHA-256 of the canonical architecture JSON (mode excluded)
    u32 + utf-8             model kind: teacher | student | discriminator
    u32 + utf-8             configuration JSON
    u32                     tensor count
    per tensor, sorted by name:
        u16 + utf-8         name
        u8                  ndim
        u32 * ndim          dims
        u8                  dtype code (1 = float64, 2 = float32)
        u64                 offset into the data section
        u64                 byte length
    data section            raw little-endian tensor bytes, in table order
"""
import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from .discriminator import Discriminator
from .exceptions import (CheckpointMagicError, CheckpointTruncatedError, CheckpointVersionError,
                         ConfigMismatchError, ShapeError)
from .models import AvatarDiT, ModelConfig
from .util import canonical_json, config_digest

logger = logging.getLogger(__name__)

MAGIC = b"SAVC1"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f8"), 2: np.dtype("<f4")}
_CODE_OF = {np.dtype("float64"): 1, np.dtype("float32"): 2}
KINDS = ("teacher", "student", "discriminator")


@dataclass
class CheckpointData:
    kind: str
    config: Dict
    digest: bytes
    tensors: Dict[str, np.ndarray]


def architecture_digest(kind: str, config: Dict) -> bytes:
    fields = {k: v for k, v in config.items() if k != "mode"}
    if kind != "discriminator":
        fields = {k: v for k, v in fields.items() if k not in ("num_queries", "global_branch")}
    return config_digest(fields)


def encode_checkpoint(kind: str, config: Dict, tensors: Dict[str, np.ndarray]) -> bytes:
    if kind not in KINDS:
        raise ShapeError(f"unknown checkpoint kind {kind!r}")
    kind_bytes = kind.encode("utf-8")
    config_bytes = canonical_json(config).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION), architecture_digest(kind, config),
             struct.pack("<I", len(kind_bytes)), kind_bytes,
             struct.pack("<I", len(config_bytes)), config_bytes,
             struct.pack("<I", len(tensors))]
    data, offset = [], 0
    for name in sorted(tensors):
        array = np.asarray(tensors[name])
        code = _CODE_OF.get(array.dtype)
        if code is None:
            raise ShapeError(f"{name}: unsupported dtype {array.dtype}")
        raw = np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes()
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_bytes)) + name_bytes)
        parts.append(struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(struct.pack("<BQQ", code, offset, len(raw)))
        data.append(raw)
        offset += len(raw)
    return b"".join(parts + data)


class _Reader:

    def __init__(self, payload: bytes):
        self.payload = payload
        self.pos = 0

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.payload):
            raise CheckpointTruncatedError(f"checkpoint ends at byte {len(self.payload)}, "
                                           f"needed {self.pos + size}")
        chunk = self.payload[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str):
        values = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return values if len(values) > 1 else values[0]

    def text(self, length_fmt: str) -> str:
        return self.take(self.unpack(length_fmt)).decode("utf-8")


def decode_checkpoint(payload: bytes) -> CheckpointData:
    reader = _Reader(payload)
    magic = payload[:len(MAGIC)]
    if magic != MAGIC:
        raise CheckpointMagicError(f"bad checkpoint magic {magic!r}")
    reader.take(len(MAGIC))
    version = reader.unpack("<H")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {VERSION}")
    digest = reader.take(32)
    kind = reader.text("<I")
    config = json.loads(reader.text("<I"))
    if architecture_digest(kind, config) != digest:
        raise ConfigMismatchError("checkpoint digest does not match its own configuration")
    table = []
    for _ in range(reader.unpack("<I")):
        name = reader.text("<H")
        ndim = reader.unpack("<B")
        dims = struct.unpack(f"<{ndim}I", reader.take(4 * ndim)) if ndim else ()
        code, offset, nbytes = reader.unpack("<BQQ")
        if code not in DTYPE_CODES:
            raise CheckpointVersionError(f"{name}: unknown dtype code {code}")
        table.append((name, tuple(dims), DTYPE_CODES[code], offset, nbytes))
    base = reader.pos
    tensors = {}
    for name, dims, dtype, offset, nbytes in table:
        end = base + offset + nbytes
        if end > len(payload):
            raise CheckpointTruncatedError(f"{name}: data ends at {end}, file has {len(payload)} bytes")
        if nbytes != int(np.prod(dims)) * dtype.itemsize:
            raise CheckpointTruncatedError(f"{name}: {nbytes} bytes cannot hold {dims}")
        tensors[name] = np.frombuffer(payload, dtype=dtype, count=int(np.prod(dims)),
                                      offset=base + offset).reshape(dims).copy()
    return CheckpointData(kind, config, digest, tensors)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

def _describe(model: Union[AvatarDiT, Discriminator]):
    if isinstance(model, Discriminator):
        config = asdict(model.config)
        config.update(num_queries=len(model.extractors), global_branch=model.global_branch)
        return "discriminator", config
    return model.config.mode, asdict(model.config)


def save_checkpoint(model: Union[AvatarDiT, Discriminator], path: Union[str, Path]) -> bytes:
    kind, config = _describe(model)
    payload = encode_checkpoint(kind, config, model.state_dict())
    Path(path).write_bytes(payload)
    logger.info("[Checkpoint] saved %s (%d tensors, %d bytes) to %s",
                kind, len(model.state_dict()), len(payload), path)
    return payload


def read_checkpoint(path: Union[str, Path]) -> CheckpointData:
    return decode_checkpoint(Path(path).read_bytes())


def load_checkpoint(path: Union[str, Path], expected: Optional[ModelConfig] = None,
                    mode: Optional[str] = None) -> Union[AvatarDiT, Discriminator]:
    """Rebuild the saved model; ``mode`` reloads DiT weights as teacher or student."""
    data = read_checkpoint(path)
    model_config = ModelConfig.from_dict(data.config)
    if expected is not None and config_digest(expected.architecture()) != config_digest(model_config.architecture()):
        raise ConfigMismatchError(f"{path}: saved architecture differs from the requested configuration")
    if data.kind == "discriminator":
        backbone = AvatarDiT(model_config.with_mode("teacher"))
        model = Discriminator(backbone, data.config.get("num_queries", 3),
                              global_branch=data.config.get("global_branch", True))
    else:
        model = AvatarDiT(model_config.with_mode(mode or data.kind))
    model.load_state_dict(data.tensors)
    logger.info("[Checkpoint] loaded %s from %s", data.kind, path)
    return model
