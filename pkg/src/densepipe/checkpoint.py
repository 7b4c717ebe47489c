"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"PDTL" | u32 version | u32 len + UTF-8 JSON config
    | u32 tensor count | tensors...
    | 0x4F optimizer section | 0x00

    tensor := u16 len + UTF-8 name | u8 rank | u32 extent * rank
              | u8 dtype (0x01 = float64) | raw values
    optimizer section := u32 len + UTF-8 JSON {kind, t} | u32 count | tensors

The optimizer section is optional; without it the terminator byte follows
the tensor table directly.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (CheckpointError, CheckpointMagicError, CheckpointMismatchError,
                     CheckpointTruncatedError, CheckpointVersionError)
from .model import DenseNetConfig, build_model
from .optim import OptimizerState

MAGIC = b"PDTL"
FORMAT_VERSION = 1
DTYPE_F64 = 0x01
TAG_OPTIMIZER = 0x4F
TAG_END = 0x00


@dataclass
class Checkpoint:
    config: dict
    tensors: dict
    optimizer: OptimizerState | None = None
    version: int = FORMAT_VERSION

    @property
    def model_config(self):
        return DenseNetConfig.from_dict(self.config["model"])

    @property
    def kind(self):
        return self.config.get("kind", "dense")

    @property
    def meta(self):
        return self.config.setdefault("meta", {})


def checkpoint_from_model(model, optimizer=None, **extra):
    """Snapshot ``model`` (parameters, BN statistics, config) as a Checkpoint."""
    config = {"model": model.config.to_dict(), "kind": model.kind,
              "frozen": sorted(model.frozen), "meta": {}}
    config.update(extra)
    return Checkpoint(config, model.state_arrays(), optimizer)


def model_from_checkpoint(ckpt):
    """Rebuild the model and load every tensor, checking names and shapes."""
    model = build_model(ckpt.model_config, ckpt.kind)
    expected = {k: t.shape for k, t in model.params.items()}
    expected.update({k: v.shape for k, v in model.buffers.items()})
    missing = sorted(set(expected) - set(ckpt.tensors))
    extra = sorted(set(ckpt.tensors) - set(expected))
    if missing or extra:
        raise CheckpointMismatchError(
            f"checkpoint tensors do not match config: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, shape in expected.items():
        if ckpt.tensors[name].shape != shape:
            raise CheckpointMismatchError(
                f"tensor {name!r} has shape {ckpt.tensors[name].shape}, config implies {shape}")
    model.load_state_arrays(ckpt.tensors)
    frozen = ckpt.config.get("frozen") or []
    if frozen:
        model.set_frozen(frozen)
    return model


# ------------------------------------------------------------- encoding


def _pack_tensors(tensors):
    out = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} has too many dimensions")
        out.append(struct.pack("<H", len(raw_name)))
        out.append(raw_name)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(struct.pack("<B", DTYPE_F64))
        out.append(arr.tobytes())
    return b"".join(out)


def _pack_text(obj):
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_checkpoint(ckpt):
    parts = [MAGIC, struct.pack("<I", ckpt.version), _pack_text(ckpt.config), _pack_tensors(ckpt.tensors)]
    if ckpt.optimizer is not None:
        opt = ckpt.optimizer
        parts += [bytes([TAG_OPTIMIZER]), _pack_text({"kind": opt.kind, "t": opt.t}),
                  _pack_tensors(opt.buffers())]
    parts.append(bytes([TAG_END]))
    return b"".join(parts)


def save_checkpoint(model_or_ckpt, path, optimizer=None, **extra):
    ckpt = model_or_ckpt if isinstance(model_or_ckpt, Checkpoint) else \
        checkpoint_from_model(model_or_ckpt, optimizer, **extra)
    data = encode_checkpoint(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return ckpt


# ------------------------------------------------------------- decoding


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"checkpoint truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def text(self, what):
        (n,) = self.unpack("<I", f"{what} length")
        raw = self.take(n, what)
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"malformed {what}: {exc}") from None

    def tensors(self):
        (count,) = self.unpack("<I", "tensor count")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<H", "tensor name length")
            name = self.take(nlen, "tensor name").decode("utf-8", errors="strict")
            (rank,) = self.unpack("<B", f"rank of {name}")
            shape = self.unpack(f"<{rank}I", f"extents of {name}") if rank else ()
            (dtype,) = self.unpack("<B", f"dtype of {name}")
            if dtype != DTYPE_F64:
                raise CheckpointError(f"tensor {name!r} has unsupported dtype byte 0x{dtype:02x}")
            count_vals = int(np.prod(shape)) if shape else 1
            raw = self.take(8 * count_vals, f"values of {name}")
            if name in out:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        return out


def decode_checkpoint(buf):
    r = _Reader(buf)
    magic = r.take(4, "magic") if len(buf) >= 4 else None
    if magic != MAGIC:
        raise CheckpointMagicError(f"not a checkpoint: magic bytes {buf[:4]!r} != {MAGIC!r}")
    (version,) = r.unpack("<I", "format version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    config = r.text("config")
    tensors = r.tensors()
    (tag,) = r.unpack("<B", "section tag")
    optimizer = None
    if tag == TAG_OPTIMIZER:
        head = r.text("optimizer header")
        bufs = r.tensors()
        optimizer = OptimizerState(head["kind"], int(head["t"]))
        for key, arr in bufs.items():
            slot, _, pname = key.partition("/")
            (optimizer.first if slot == "m" else optimizer.second)[pname] = arr
        (tag,) = r.unpack("<B", "terminator")
    if tag != TAG_END:
        raise CheckpointError(f"unexpected section tag 0x{tag:02x}")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after terminator")
    return Checkpoint(config, tensors, optimizer, version)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def load_model(path):
    return model_from_checkpoint(load_checkpoint(path))
