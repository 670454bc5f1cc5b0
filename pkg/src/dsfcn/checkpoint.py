"""Binary checkpoint container for model parameters, the optional fitted
classifier, and an echo of the architecture config.

Layout (all integers little-endian):
  magic "DSFC" | version u16 | stage u8 | tensor count u32
  per tensor: name length u16, UTF-8 name, rank u8, dims u32 each, values f32
  classifier: presence u8, then a and b as f64 when present
  config echo: byte length u32, UTF-8 "key = value" lines

Tensors are written in lexicographic name order, so saving a loaded file
reproduces it byte for byte. Loading validates every tensor shape against
the embedded config.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import ParamSet, Tensor
from .classifier import SigmoidClassifier
from .model import FcnConfig, FcnModel, param_specs

MAGIC = b"DSFC"
VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is malformed or inconsistent with its config echo."""


@dataclass
class Checkpoint:
    stage: int
    config: FcnConfig
    tensors: dict[str, np.ndarray]
    classifier: SigmoidClassifier | None = None


def config_to_text(config: FcnConfig) -> str:
    return "".join(f"{f.name} = {getattr(config, f.name)}\n" for f in fields(config))


def config_from_text(text: str) -> FcnConfig:
    values: dict[str, int] = {}
    names = {f.name for f in fields(FcnConfig)}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in names:
            raise CheckpointError(f"unknown config key {key!r} in checkpoint echo")
        try:
            values[key] = int(value.strip())
        except ValueError as exc:
            raise CheckpointError(f"bad config value for {key!r}: {value.strip()!r}") from exc
    missing = names - values.keys()
    if missing:
        raise CheckpointError(f"config echo is missing keys {sorted(missing)}")
    return FcnConfig(**values)


def checkpoint_from_model(model: FcnModel, stage: int,
                          classifier: SigmoidClassifier | None = None) -> Checkpoint:
    tensors = {name: t.data.copy() for name, t in model.params.items()}
    return Checkpoint(stage=stage, config=model.config, tensors=tensors,
                      classifier=classifier)


def model_from_checkpoint(ckpt: Checkpoint) -> FcnModel:
    params = ParamSet()
    for name in sorted(ckpt.tensors):
        params.add(name, Tensor(ckpt.tensors[name].copy(), requires_grad=True))
    return FcnModel(config=ckpt.config, params=params)


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> None:
    if not (0 <= ckpt.stage <= 255):
        raise ValueError(f"stage tag must fit a byte, got {ckpt.stage}")
    _validate_tensors(ckpt)
    parts = [MAGIC, struct.pack("<HB", VERSION, ckpt.stage),
             struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    if ckpt.classifier is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<Bdd", 1, ckpt.classifier.a, ckpt.classifier.b))
    echo = config_to_text(ckpt.config).encode("utf-8")
    parts.append(struct.pack("<I", len(echo)))
    parts.append(echo)
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint file is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: Path | str) -> Checkpoint:
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version, stage = reader.unpack("<HB")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (count,) = reader.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor {name!r}")
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}I")
        size = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(reader.take(4 * size), dtype="<f4")
        tensors[name] = values.reshape(dims).astype(np.float32)
    (has_classifier,) = reader.unpack("<B")
    classifier = None
    if has_classifier == 1:
        a, b = reader.unpack("<dd")
        classifier = SigmoidClassifier(a=a, b=b)
    elif has_classifier != 0:
        raise CheckpointError(f"{path}: bad classifier presence flag {has_classifier}")
    (echo_len,) = reader.unpack("<I")
    config = config_from_text(reader.take(echo_len).decode("utf-8"))
    if reader.pos != len(reader.buf):
        raise CheckpointError(f"{path}: {len(reader.buf) - reader.pos} trailing bytes")
    ckpt = Checkpoint(stage=stage, config=config, tensors=tensors, classifier=classifier)
    _validate_tensors(ckpt)
    return ckpt


def _validate_tensors(ckpt: Checkpoint) -> None:
    expected = {spec.name: spec.shape for spec in param_specs(ckpt.config)}
    if set(ckpt.tensors) != set(expected):
        missing = sorted(set(expected) - set(ckpt.tensors))
        extra = sorted(set(ckpt.tensors) - set(expected))
        raise CheckpointError(f"tensor table does not match the config: "
                              f"missing {missing}, unexpected {extra}")
    for name, arr in ckpt.tensors.items():
        if tuple(arr.shape) != expected[name]:
            raise CheckpointError(f"tensor {name!r} has shape {tuple(arr.shape)}, "
                                  f"config requires {expected[name]}")
