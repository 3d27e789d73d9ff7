"""Binary checkpoint files and checkpoint averaging.

Layout (all integers little-endian)::

    b"DYSI" | u32 version | u32 n_params | n_params * tensor
    u32 n_opt | n_opt * tensor | u64 step | u64 opt_step | u32 meta_len | meta (UTF-8 JSON)

    tensor = u16 name_len | name (UTF-8) | u8 rank | rank * u32 dim | f32 payload

Optimizer moments are stored as tensors named ``m/<param>`` and ``v/<param>``.
The JSON metadata (sorted keys) carries the model config, the vocabulary and
digests of the run config and vocabulary.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dysi.errors import CheckpointError
from dysi.optim import OptimizerState

MAGIC = b"DYSI"
VERSION = 1
_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: OptimizerState | None = None
    step: int = 0
    meta: dict = field(default_factory=dict)


def digest(obj) -> str:
    """sha256 of a canonical JSON rendering."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _write_tensor(out: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"tensor name too long: {name[:40]}...")
    arr = np.asarray(arr)
    if arr.ndim > 0xFF:
        raise CheckpointError(f"tensor {name} has rank {arr.ndim}")
    out.write(struct.pack("<H", len(raw)))
    out.write(raw)
    out.write(struct.pack("<B", arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> tuple[str, np.ndarray]:
        (n,) = self.unpack("<H")
        name = self.take(n).decode("utf-8")
        (rank,) = self.unpack("<B")
        shape = self.unpack(f"<{rank}I")
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(self.take(4 * count), dtype=_F32).astype(np.float32).reshape(shape)
        return name, arr


def to_bytes(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(ckpt.params)))
    for name in sorted(ckpt.params):
        _write_tensor(out, name, ckpt.params[name])
    opt = ckpt.optimizer
    moments = []
    if opt is not None:
        moments = [(f"m/{k}", opt.m[k]) for k in sorted(opt.m)] + [(f"v/{k}", opt.v[k]) for k in sorted(opt.v)]
    out.write(struct.pack("<I", len(moments)))
    for name, arr in moments:
        _write_tensor(out, name, arr)
    meta = dict(ckpt.meta)
    if opt is not None:
        meta["optimizer"] = {"beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out.write(struct.pack("<QQI", ckpt.step, opt.step if opt is not None else 0, len(blob)))
    out.write(blob)
    return out.getvalue()


def from_bytes(blob: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, n_params = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    params = dict(r.tensor() for _ in range(n_params))
    (n_opt,) = r.unpack("<I")
    moments = dict(r.tensor() for _ in range(n_opt))
    step, opt_step, meta_len = r.unpack("<QQI")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    if r.pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.pos} trailing bytes")
    opt = None
    if moments:
        hp = meta.pop("optimizer", {})
        opt = OptimizerState(m={k[2:]: v for k, v in moments.items() if k.startswith("m/")},
                             v={k[2:]: v for k, v in moments.items() if k.startswith("v/")},
                             step=opt_step, **hp)
    else:
        meta.pop("optimizer", None)
    return Checkpoint(params, opt, step, meta)


def save(path, ckpt: Checkpoint) -> Path:
    """Atomic write: a crash never leaves a half-written checkpoint behind."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)
    return path


def load(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    return from_bytes(blob, path)


def average_checkpoints(paths) -> Checkpoint:
    """Element-wise mean of the parameters; optimizer state is dropped."""
    paths = list(paths)
    if not paths:
        raise CheckpointError("no checkpoints to average")
    first = load(paths[0])
    total = {k: v.astype(np.float64) for k, v in first.params.items()}
    steps = [first.step]
    for p in paths[1:]:
        ck = load(p)
        if set(ck.params) != set(total):
            raise CheckpointError(f"{p}: parameter names differ from {paths[0]}")
        if ck.meta.get("vocab_digest") != first.meta.get("vocab_digest"):
            raise CheckpointError(f"{p}: vocabulary differs from {paths[0]}")
        for k, v in ck.params.items():
            if v.shape != total[k].shape:
                raise CheckpointError(f"{p}: shape of {k} is {v.shape}, expected {total[k].shape}")
            total[k] += v
        steps.append(ck.step)
    params = {k: (v / len(paths)).astype(np.float32) for k, v in total.items()}
    meta = dict(first.meta)
    meta["averaged_from"] = [str(p) for p in paths]
    return Checkpoint(params, None, max(steps), meta)
