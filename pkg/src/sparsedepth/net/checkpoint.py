"""Self-describing binary checkpoints.

Layout (all integers little-endian)::

    magic    b"SDCKPT"          6 bytes
    version  u16                currently 1
    arch_len u32, arch text     UTF-8 layer lines (see graph.specs_to_text)
    meta_len u32, meta text     UTF-8 key=value lines (free-form provenance)
    count    u32
    count x  name_len u16, name UTF-8, ndim u8, dims u64[ndim], payload f8[prod(dims)]

Trainable parameters are named ``<layer>.<param>``; batchnorm running stats
use the ``buffer:`` prefix.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .graph import NetworkGraph, specs_from_text

MAGIC = b"SDCKPT"
VERSION = 1
_BUFFER = "buffer:"


class CheckpointError(ValueError):
    pass


def _write_text(buf, text: str):
    data = text.encode("utf-8")
    buf.write(struct.pack("<I", len(data)))
    buf.write(data)


def _read_exact(buf, n):
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _read_text(buf) -> str:
    (n,) = struct.unpack("<I", _read_exact(buf, 4))
    return _read_exact(buf, n).decode("utf-8")


def dumps(g: NetworkGraph, meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    _write_text(buf, g.arch_text())
    _write_text(buf, "".join(f"{k}={v}\n" for k, v in (meta or {}).items()))
    grids = [(name, g.params[name]) for name in sorted(g.params)]
    grids += [(_BUFFER + name, g.buffers[name]) for name in sorted(g.buffers)]
    buf.write(struct.pack("<I", len(grids)))
    for name, arr in grids:
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(data: bytes, dtype=np.float64) -> tuple[NetworkGraph, dict]:
    buf = io.BytesIO(data)
    if _read_exact(buf, len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<H", _read_exact(buf, 2))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arch = _read_text(buf)
    meta = {}
    for line in _read_text(buf).splitlines():
        key, _, value = line.partition("=")
        meta[key] = value
    g = NetworkGraph(specs_from_text(arch), dtype=dtype)
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    seen = set()
    for _ in range(count):
        (n,) = struct.unpack("<H", _read_exact(buf, 2))
        name = _read_exact(buf, n).decode("utf-8")
        (ndim,) = struct.unpack("<B", _read_exact(buf, 1))
        shape = struct.unpack(f"<{ndim}Q", _read_exact(buf, 8 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(_read_exact(buf, 8 * size), dtype="<f8").reshape(shape).astype(dtype)
        store, key = (g.buffers, name[len(_BUFFER):]) if name.startswith(_BUFFER) else (g.params, name)
        if key not in store:
            raise CheckpointError(f"checkpoint grid {name!r} does not belong to the stored architecture")
        if store[key].shape != arr.shape:
            raise CheckpointError(f"grid {name!r} has shape {arr.shape}, architecture expects {store[key].shape}")
        store[key] = arr
        seen.add(name)
    expected = set(g.params) | {_BUFFER + b for b in g.buffers}
    if seen != expected:
        raise CheckpointError(f"checkpoint is missing grids {sorted(expected - seen)}")
    return g, meta


def save(path, g: NetworkGraph, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(g, meta))


def load(path, dtype=np.float64) -> tuple[NetworkGraph, dict]:
    with open(path, "rb") as fh:
        return loads(fh.read(), dtype=dtype)
