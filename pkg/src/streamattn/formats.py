"""Binary file formats.

Frame files (``BSAF``), all little-endian::

    magic      4s   b"BSAF"
    version    u16  1
    n_frames   u32
    dim        u32
    precision  u8   4 (float32) or 8 (float64)
    values     n_frames * dim floats, row-major

Parameter checkpoints (``BSAT``)::

    magic      4s   b"BSAT"
    version    u16  1
    endianness u8   0 = little
    precision  u8   4 or 8
    then, until EOF, one record per tensor:
        name_len u16, name utf-8, rank u8, dims rank*u32, values (little-endian)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FRAME_MAGIC = b"BSAF"
CKPT_MAGIC = b"BSAT"
VERSION = 1

_FRAME_HEADER = struct.Struct("<4sHIIB")
_CKPT_HEADER = struct.Struct("<4sHBB")


class FormatError(ValueError):
    pass


def _dtype(precision: int) -> np.dtype:
    if precision == 4:
        return np.dtype("<f4")
    if precision == 8:
        return np.dtype("<f8")
    raise FormatError(f"unsupported precision flag {precision}")


def write_frames(path, frames, precision: int = 8) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise FormatError(f"frames must be 2-D, got shape {frames.shape}")
    dt = _dtype(precision)
    with open(path, "wb") as fh:
        fh.write(_FRAME_HEADER.pack(FRAME_MAGIC, VERSION, frames.shape[0], frames.shape[1], precision))
        fh.write(np.ascontiguousarray(frames, dtype=dt).tobytes())


def read_frames(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _FRAME_HEADER.size:
        raise FormatError("truncated frame file header")
    magic, version, n, d, precision = _FRAME_HEADER.unpack_from(raw)
    if magic != FRAME_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported frame file version {version}")
    dt = _dtype(precision)
    body = raw[_FRAME_HEADER.size :]
    if len(body) != n * d * dt.itemsize:
        raise FormatError(f"expected {n * d * dt.itemsize} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dt).reshape(n, d).astype(np.float64)


def write_tensors(path, tensors: dict[str, np.ndarray], precision: int = 8) -> None:
    dt = _dtype(precision)
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, VERSION, 0, precision))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise FormatError("truncated checkpoint header")
    magic, version, endian, precision = _CKPT_HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if endian != 0:
        raise FormatError("only little-endian checkpoints are supported")
    dt = _dtype(precision)
    pos = _CKPT_HEADER.size
    out = {}
    try:
        while pos < len(raw):
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            nbytes = count * dt.itemsize
            if pos + nbytes > len(raw):
                raise FormatError(f"tensor {name!r} truncated")
            out[name] = np.frombuffer(raw, dtype=dt, count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += nbytes
    except struct.error as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from exc
    return out


def save_blocks(path, blocks, precision: int = 8, extra: dict[str, np.ndarray] | None = None) -> None:
    """Checkpoint a list of BlockParams (plus optional named tensors)."""
    tensors: dict[str, np.ndarray] = {"meta.n_blocks": np.array(len(blocks), dtype=np.float64)}
    for i, p in enumerate(blocks):
        tensors[f"block{i}.n_heads"] = np.array(p.n_heads, dtype=np.float64)
        for name, arr in p.arrays().items():
            tensors[f"block{i}.{name}"] = arr
    for name, arr in (extra or {}).items():
        tensors[name] = arr
    write_tensors(path, tensors, precision)


def load_blocks(path):
    """Inverse of :func:`save_blocks`; returns ``(blocks, extra_tensors)``."""
    from .block import BlockParams

    tensors = read_tensors(path)
    n_blocks = int(tensors.pop("meta.n_blocks"))
    blocks = []
    for i in range(n_blocks):
        n_heads = int(tensors.pop(f"block{i}.n_heads"))
        arrays = {name: tensors.pop(f"block{i}.{name}") for name in BlockParams.names()}
        blocks.append(BlockParams(n_heads=n_heads, **arrays))
    return blocks, tensors
