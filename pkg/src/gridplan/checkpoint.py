"""Binary checkpoint container for model parameters and optimizer state.

Format (little-endian): magic ``GSVINCK``, version u16, length-prefixed
(u32) UTF-8 JSON config, entry count u32, then per entry: name (u16 length
prefix, UTF-8), four u32 dims, and the float64 payload. A CRC32 (u32) over
everything before it closes the file.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ._binio import FormatError, Reader, check_crc, check_magic, crc32, pack_u16, pack_u32
from .models import ConvKernel, GsParams, Model, ModelConfig
from .tensor import Tensor

MAGIC = b"GSVINCK"
VERSION = 1


def save_checkpoint(path, config: dict, arrays: dict[str, np.ndarray]) -> None:
    config_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [MAGIC, pack_u16(VERSION), pack_u32(len(config_bytes)), config_bytes,
             pack_u32(len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"checkpoint entry {name!r} must be rank-4, got shape {arr.shape}")
        name_bytes = name.encode("utf-8")
        parts.append(pack_u16(len(name_bytes)))
        parts.append(name_bytes)
        parts.extend(pack_u32(d) for d in arr.shape)
        parts.append(arr.tobytes())
    blob = b"".join(parts)
    Path(path).write_bytes(blob + pack_u32(crc32(blob)))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise FormatError("truncated checkpoint")
    check_crc(buf[:-4], Reader(buf[-4:]).u32(), "checkpoint")
    reader = Reader(buf[:-4])
    check_magic(reader, MAGIC, "checkpoint")
    version = reader.u16()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    config = json.loads(reader.take(reader.u32()).decode("utf-8"))
    arrays = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u16()).decode("utf-8")
        dims = tuple(reader.u32() for _ in range(4))
        count = int(np.prod(dims))
        data = np.frombuffer(reader.take(count * 8), dtype="<f8").reshape(dims)
        arrays[name] = data.copy()
    if reader.remaining():
        raise FormatError(f"{reader.remaining()} trailing bytes after last checkpoint entry")
    return config, arrays


def save_model(path, model: Model, extra_config: dict | None = None,
               extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    """Write a model (and optionally optimizer state) to one checkpoint file."""
    config = {"model": model.config.to_dict()}
    if extra_config:
        config.update(extra_config)
    arrays = {name: t.data for name, t in model.named_parameters().items()}
    if extra_arrays:
        arrays.update({name: arr for name, arr in extra_arrays.items()})
    save_checkpoint(path, config, arrays)


def model_from_arrays(config: ModelConfig, arrays: dict[str, np.ndarray]) -> Model:
    def param(name: str) -> Tensor:
        if name not in arrays:
            raise FormatError(f"checkpoint missing parameter {name!r}")
        return Tensor(arrays[name], requires_grad=True)

    gs = None
    summary = None
    if config.variant == "GSVIN":
        gs = GsParams(*[ConvKernel(param(f"gs/{field}")) for field in GsParams.FIELDS])
    elif config.variant == "VIRN":
        summary = param("summary/logits")
    return Model(
        config,
        ConvKernel(param("reward/conv1")),
        ConvKernel(param("reward/conv2")),
        ConvKernel(param("vi/kernel")),
        ConvKernel(param("head/fc")),
        gs=gs,
        summary_logits=summary,
    )


def load_model(path) -> tuple[Model, dict, dict[str, np.ndarray]]:
    """Read a model checkpoint; returns (model, full config, non-model arrays)."""
    config, arrays = load_checkpoint(path)
    if "model" not in config:
        raise FormatError("checkpoint carries no model config")
    model_config = ModelConfig.from_dict(config["model"])
    model = model_from_arrays(model_config, arrays)
    taken = set(model.named_parameters())
    rest = {name: arr for name, arr in arrays.items() if name not in taken}
    return model, config, rest
