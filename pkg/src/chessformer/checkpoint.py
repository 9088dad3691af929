"""Versioned binary container for named float32 tensors plus key=value metadata.

Layout (little-endian):
    magic b"CFCKPT\\0\\0", u16 version
    u32 length, UTF-8 metadata text (sorted ``key=value`` lines)
    u32 tensor count, then per tensor:
        u16 name length, UTF-8 name, u8 rank, rank x u32 extents, float32 data

Used for model checkpoints (``model/`` tensors, ``opt/`` optimizer state,
``swa/`` averages) and for activation shards.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CFCKPT\x00\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def meta_text(meta: dict) -> str:
    for k, v in meta.items():
        if "=" in str(k) or "\n" in str(k) or "\n" in str(v):
            raise CheckpointError(f"metadata entry {k!r} cannot be written as key=value text")
    return "".join(f"{k}={v}\n" for k, v in sorted((str(k), str(v)) for k, v in meta.items()))


def parse_meta(text: str) -> dict[str, str]:
    return dict(line.split("=", 1) for line in text.splitlines() if line)


def dumps(meta: dict, tensors: dict) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<H", VERSION))
    text = meta_text(meta).encode()
    out.write(struct.pack("<I", len(text)))
    out.write(text)
    out.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode()
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes())
    return out.getvalue()


def loads(buf: bytes) -> tuple[dict[str, str], dict[str, torch.Tensor]]:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (size,) = struct.unpack("<I", take(4))
    meta = parse_meta(bytes(take(size)).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        numel = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(4 * numel), dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return meta, tensors


def save(path, meta: dict, tensors: dict) -> None:
    Path(path).write_bytes(dumps(meta, tensors))


def load(path) -> tuple[dict[str, str], dict[str, torch.Tensor]]:
    return loads(Path(path).read_bytes())


# -- model helpers -------------------------------------------------------------

def save_model(path, model, extra_meta: dict | None = None, extra_tensors: dict | None = None) -> None:
    meta = parse_meta(model.cfg.to_text())
    meta.update(extra_meta or {})
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    tensors.update(extra_tensors or {})
    save(path, meta, tensors)


def load_model(path, prefix: str = "model/"):
    """Build a ``Chessformer`` from a checkpoint. ``prefix="swa/"`` loads the averaged weights."""
    from .model import Chessformer, ModelConfig

    meta, tensors = load(path)
    model = Chessformer(ModelConfig.from_dict(meta))
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    if not state:
        raise CheckpointError(f"checkpoint has no tensors under {prefix!r}")
    model.load_state_dict(state)
    model.eval()
    return model, meta, tensors
