"""Binary named-tensor snapshots of a ParameterStore.

Layout, all little-endian:
  magic "QDNCKPT1" | u32 version | u32 tensor count
  per tensor: u16 name length | UTF-8 name | u8 rank | u32 extents... |
              float32 row-major values
Values are stored at 32-bit precision; the round trip is bit-exact at
that precision. Tensors are written in sorted-name order so files are
deterministic.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import ParameterStore

MAGIC = b"QDNCKPT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, store: ParameterStore) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(store.entries)))
        for name in store.names():
            value = store.entries[name].value
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise CheckpointError(f"tensor name too long: {name!r}")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", value.ndim))
            for extent in value.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read tensors back as float64 arrays keyed by name."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(MAGIC), "magic bytes")
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            if name in tensors:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            if rank > 2:
                raise CheckpointError(f"tensor {name!r} has rank {rank} (max 2)")
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, "extent"))[0] for _ in range(rank)
            )
            n_values = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 4 * n_values, f"values of {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError("trailing bytes after final tensor")
    return tensors


def load_into_store(path, store: ParameterStore) -> None:
    """Overwrite a built store's values with checkpoint tensors (names must
    match exactly); optimizer moments are reset."""
    tensors = load_checkpoint(path)
    expected = set(store.entries)
    got = set(tensors)
    if expected != got:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise CheckpointError(f"tensor name mismatch: missing {missing}, unexpected {extra}")
    for name, value in tensors.items():
        entry = store.entries[name]
        if value.shape != entry.value.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {value.shape}, store expects {entry.value.shape}"
            )
        entry.value = value
        entry.m = np.zeros_like(value)
        entry.v = np.zeros_like(value)
        entry.step = 0
