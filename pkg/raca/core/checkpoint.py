"""Binary checkpoints for trained parameters.

Layout (little endian):

    b"RACACKPT"  magic
    u32          format version
    u32 + bytes  run config JSON
    u64          env step
    u32          tensor count, then per tensor:
                   u16 + bytes name, u8 ndim, u32 * ndim extents, float64 data
    u8           1 if optimizer state follows
                   u64 step, f64 lr, f64 alpha, f64 eps, tensors as above
    u32          CRC32 of everything before it
"""

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from raca.core.numerics import OptimizerState, ParamStore
from raca.utils.errors import (
    CheckpointChecksumError,
    CheckpointError,
    CheckpointVersionError,
)
from raca.utils.logger import get_logger

MAGIC = b"RACACKPT"
FORMAT_VERSION = 1
AGENT_PREFIX = "agent."


@dataclass
class Checkpoint:
    params: ParamStore
    run_config: Dict[str, Any] = field(default_factory=dict)
    env_step: int = 0
    optimizer: Optional[OptimizerState] = None
    version: int = FORMAT_VERSION


def _pack_tensors(items: List[Tuple[str, np.ndarray]]) -> bytes:
    chunks = [struct.pack("<I", len(items))]
    for name, value in items:
        encoded = name.encode("utf-8")
        array = np.ascontiguousarray(value, dtype="<f8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes())
    return b"".join(chunks)


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    config_blob = json.dumps(checkpoint.run_config, sort_keys=True).encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<I", checkpoint.version),
        struct.pack("<I", len(config_blob)),
        config_blob,
        struct.pack("<Q", checkpoint.env_step),
        _pack_tensors(list(checkpoint.params.items())),
    ]
    opt = checkpoint.optimizer
    if opt is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<B", 1))
        parts.append(struct.pack("<Qddd", opt.step, opt.lr, opt.alpha, opt.eps))
        parts.append(_pack_tensors(list(opt.square_avg.items())))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise CheckpointChecksumError("Checkpoint ends mid-record")
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> Tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensors(self) -> Dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = self.unpack("<H")
            name = self.take(name_len).decode("utf-8")
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I") if ndim else ()
            size = int(np.prod(shape)) if ndim else 1
            out[name] = np.frombuffer(self.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        return out


def decode_checkpoint(data: bytes, agent_only: bool = False) -> Checkpoint:
    """Parse checkpoint bytes; ``agent_only`` keeps just the agent network."""
    if len(data) < len(MAGIC) + 8 or not data.startswith(MAGIC):
        raise CheckpointError("Not a raca checkpoint (bad magic bytes)")
    body, trailer = data[:-4], data[-4:]
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"Checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    (expected,) = struct.unpack("<I", trailer)
    if zlib.crc32(body) != expected:
        raise CheckpointChecksumError("Checkpoint checksum mismatch; file is truncated or corrupted")

    reader = _Reader(body)
    reader.take(len(MAGIC) + 4)
    (config_len,) = reader.unpack("<I")
    run_config = json.loads(reader.take(config_len).decode("utf-8"))
    (env_step,) = reader.unpack("<Q")
    tensors = reader.tensors()
    (has_optimizer,) = reader.unpack("<B")
    optimizer = None
    if has_optimizer:
        step, lr, alpha, eps = reader.unpack("<Qddd")
        square_avg = reader.tensors()
        optimizer = OptimizerState(lr=lr, alpha=alpha, eps=eps, step=step, square_avg=square_avg)
    if reader.offset != len(body):
        raise CheckpointChecksumError("Trailing bytes after checkpoint payload")

    if agent_only:
        tensors = {n: v for n, v in tensors.items() if n.startswith(AGENT_PREFIX)}
        optimizer = None
    return Checkpoint(
        params=ParamStore(tensors),
        run_config=run_config,
        env_step=env_step,
        optimizer=optimizer,
        version=version,
    )


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> Path:
    """Write atomically: a temp file in the target directory, then os.replace."""
    logger = get_logger()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(checkpoint)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    logger.debug(f"Checkpoint saved to {path} ({len(payload)} bytes)")
    return path


def load_checkpoint(path: Path, agent_only: bool = False) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with open(path, "rb") as f:
        data = f.read()
    checkpoint = decode_checkpoint(data, agent_only=agent_only)
    get_logger().debug(
        f"Loaded {len(checkpoint.params)} tensors from {path} (env_step={checkpoint.env_step})"
    )
    return checkpoint
