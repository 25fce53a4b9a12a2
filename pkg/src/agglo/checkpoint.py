"""Versioned flat binary checkpoint format.

Layout (all integers little-endian ``u32``)::

    b"AGGL"                       magic
    version                       currently 1
    config_len, config_bytes      UTF-8 ``key=value`` lines of ModelConfig
    n_tensors
    n_tensors x (name_len, name_bytes, rank, extent * rank, float32 payload)

Tensors appear in the order given by :func:`agglo.model.param_shapes`.
Writes go to a temporary file that is renamed into place, so an interrupted
save never clobbers the previous checkpoint.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError
from .model import DecoderModel, ModelConfig, param_shapes
from .tensor import Tensor

MAGIC = b"AGGL"
VERSION = 1


def _config_text(config: ModelConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in config.to_dict().items())


def _parse_config(text: str) -> ModelConfig:
    values: dict[str, object] = {}
    int_fields = {k for k, v in ModelConfig().to_dict().items() if isinstance(v, int)}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed config line {line!r}")
        values[key] = value
    try:
        for key in int_fields & values.keys():
            values[key] = int(values[key])
        return ModelConfig(**values)
    except (TypeError, ValueError, ConfigError) as exc:
        raise CheckpointError(f"invalid stored config: {exc}") from exc


def save_checkpoint(path, model: DecoderModel) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    cfg = _config_text(model.config).encode("utf-8")
    chunks += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        chunks += [struct.pack("<I", len(raw)), raw, struct.pack("<I", t.ndim)]
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, dtype=np.float32) -> DecoderModel:
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an AGGL checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        config = _parse_config(r.take(r.u32()).decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: config block is not UTF-8") from exc
    expected = param_shapes(config)
    n = r.u32()
    if n != len(expected):
        raise CheckpointError(f"{path}: expected {len(expected)} tensors, found {n}")
    params: dict[str, Tensor] = {}
    for _ in range(n):
        name = r.take(r.u32()).decode("utf-8", errors="replace")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        if expected.get(name) != tuple(shape):
            raise CheckpointError(f"{path}: tensor {name!r} has unexpected shape {shape}")
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(dtype)
        params[name] = Tensor(data, requires_grad=True, name=name)
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    if list(params) != list(expected):
        raise CheckpointError(f"{path}: tensors out of order")
    return DecoderModel(config, params)
