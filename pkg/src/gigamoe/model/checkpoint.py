"""Self-describing binary checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes  b"GIGAMOE1"
    version    u32
    header_len u64, header  UTF-8 key/value text (config keys, then meta.* keys)
    n_blobs    u32
    per blob:  name_len u16, name, ndim u8, dims u64 * ndim, float64 data
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import InputError
from ..kvtext import atomic_write_bytes, dump_kv, from_kv, parse_kv, to_kv
from ..tensor import Tensor
from .config import ModelConfig

MAGIC = b"GIGAMOE1"
VERSION = 1


def checkpoint_bytes(config: ModelConfig, params: Mapping[str, Tensor],
                     meta: Mapping[str, object] | None = None) -> bytes:
    header = to_kv(config) + dump_kv({f"meta.{k}": v for k, v in (meta or {}).items()})
    hb = header.encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(hb)))
    buf.write(hb)
    buf.write(struct.pack("<I", len(params)))
    for name, t in params.items():
        nb = name.encode("utf-8")
        data = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
        buf.write(struct.pack("<HB", len(nb), data.ndim))
        buf.write(nb)
        buf.write(struct.pack(f"<{data.ndim}Q", *data.shape))
        buf.write(np.ascontiguousarray(data).tobytes())
    return buf.getvalue()


def save_checkpoint(path, config: ModelConfig, params: Mapping[str, Tensor],
                    meta: Mapping[str, object] | None = None) -> None:
    atomic_write_bytes(path, checkpoint_bytes(config, params, meta))


def _read(fh, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise InputError("truncated checkpoint")
    return b


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, Tensor], dict[str, str]]:
    """Returns (config, params in file order, meta strings)."""
    with open(Path(path), "rb") as fh:
        if _read(fh, 8) != MAGIC:
            raise InputError(f"{path}: not a checkpoint (bad magic)")
        version, hlen = struct.unpack("<IQ", _read(fh, 12))
        if version != VERSION:
            raise InputError(f"{path}: unsupported checkpoint version {version}")
        kv = parse_kv(_read(fh, hlen).decode("utf-8"))
        meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
        config = from_kv(ModelConfig, {k: v for k, v in kv.items() if not k.startswith("meta.")})
        (n,) = struct.unpack("<I", _read(fh, 4))
        params: dict[str, Tensor] = {}
        for _ in range(n):
            nlen, ndim = struct.unpack("<HB", _read(fh, 3))
            name = _read(fh, nlen).decode("utf-8")
            shape = struct.unpack(f"<{ndim}Q", _read(fh, 8 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(_read(fh, 8 * count), dtype="<f8").reshape(shape)
            params[name] = Tensor(data.astype(np.float64), requires_grad=True)
        if fh.read(1):
            raise InputError(f"{path}: trailing bytes after last blob")
    return config, params, meta
