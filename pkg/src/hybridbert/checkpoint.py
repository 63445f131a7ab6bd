"""Binary checkpoint format: named numpy arrays, bit-exact round-trip.

Layout: magic ``HBCK``, version u32, array count u32, then per array:
name length u16, UTF-8 name, dtype code u8 (0 = float32, 1 = float64,
2 = int64), rank u8, one u32 per dimension, raw little-endian payload.
All integers little-endian. Loading validates magic, version, and exact
length; any shortfall or duplicate name is an explicit error.
"""

from __future__ import annotations

import os
import struct
import tempfile
from typing import Mapping

import numpy as np

from .tensor import Tensor

__all__ = ["CheckpointError", "save_arrays", "load_arrays",
           "save_checkpoint", "load_checkpoint"]

MAGIC = b"HBCK"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    """Raised for any malformed, truncated, or mismatched checkpoint."""


def save_arrays(path, arrays: Mapping[str, np.ndarray]) -> None:
    """Write named arrays; the file appears atomically via rename."""
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for array {name!r}")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"array name too long: {name!r}")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        chunks.append(little.tobytes())
    payload = b"".join(chunks)

    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.buf)}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_arrays(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into a name -> array dict."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"bad magic in {path}; not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for array {name!r}")
        shape = r.unpack(f"<{rank}I")
        dtype = _CODE_DTYPES[code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(r.take(n_bytes), dtype=dtype.newbyteorder("<"))
        if name in arrays:
            raise CheckpointError(f"duplicate array name {name!r} in checkpoint")
        arrays[name] = data.astype(dtype, copy=True).reshape(shape)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} trailing bytes after last array")
    return arrays


def save_checkpoint(path, params: Mapping[str, Tensor], opt_m: Mapping[str, np.ndarray],
                    opt_v: Mapping[str, np.ndarray], step: int) -> None:
    """Persist parameters, AdamW moments, and the step counter."""
    arrays: dict[str, np.ndarray] = {"meta.step": np.array([step], dtype=np.int64)}
    for name, t in params.items():
        arrays[f"param.{name}"] = t.data
    for name, m in opt_m.items():
        arrays[f"adam.m.{name}"] = m
    for name, v in opt_v.items():
        arrays[f"adam.v.{name}"] = v
    save_arrays(path, arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], dict[str, np.ndarray], int]:
    """Inverse of save_checkpoint: (params, adam m, adam v, step)."""
    arrays = load_arrays(path)
    if "meta.step" not in arrays:
        raise CheckpointError("checkpoint lacks meta.step")
    step = int(arrays.pop("meta.step")[0])
    params, m, v = {}, {}, {}
    for name, arr in arrays.items():
        if name.startswith("param."):
            params[name[len("param."):]] = arr
        elif name.startswith("adam.m."):
            m[name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            v[name[len("adam.v."):]] = arr
        else:
            raise CheckpointError(f"unrecognized array {name!r} in checkpoint")
    if set(m) != set(params) or set(v) != set(params):
        raise CheckpointError("optimizer state does not match parameter set")
    return params, m, v, step
