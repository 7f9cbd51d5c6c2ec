"""Checkpoint files.

Layout (all integers little-endian):

    magic   b"TRIAD1"
    u32     number of parameter records
    records parameters
    u32     number of state records
    records optimizer state and run metadata

Each record is: u32 name length, UTF-8 name bytes, u8 rank, rank x u32
extents, then product(extents) float64 values in row-major order.  Scalars
are rank-0 records.  Files are written via a temp file plus atomic rename
and are byte-identical for identical (seed, schedule).
"""

from __future__ import annotations

import os
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"TRIAD1"

__all__ = ["CheckpointError", "write_records", "read_records",
           "save_checkpoint", "load_checkpoint", "MAGIC"]


class CheckpointError(ValueError):
    """Corrupt or truncated checkpoint; the message names the section."""


def _write_record(fh: BinaryIO, name: str, values: np.ndarray) -> None:
    # asarray, not ascontiguousarray: the latter promotes the rank-0
    # scalars (step counters, metadata) to rank 1
    arr = np.asarray(values, dtype=np.float64, order="C")
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<I", extent))
    fh.write(arr.tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int, section: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint in {section}")
    return buf


def _read_record(fh: BinaryIO, section: str) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", _read_exact(fh, 4, section))
    name = _read_exact(fh, name_len, section).decode("utf-8")
    where = f"{section} record {name!r}"
    (rank,) = struct.unpack("<B", _read_exact(fh, 1, where))
    shape = tuple(struct.unpack("<I", _read_exact(fh, 4, where))[0]
                  for _ in range(rank))
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    raw = _read_exact(fh, count * 8, where)
    values = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return name, values


def write_records(path: str, params: dict[str, np.ndarray],
                  state: dict[str, np.ndarray]) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name, values in params.items():
            _write_record(fh, name, values)
        fh.write(struct.pack("<I", len(state)))
        for name, values in state.items():
            _write_record(fh, name, values)
    os.replace(tmp, path)


def read_records(path: str) -> tuple[dict[str, np.ndarray],
                                     dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(
                f"bad magic {magic!r} in header (expected {MAGIC!r})")
        out: list[dict[str, np.ndarray]] = []
        for section in ("parameters", "optimizer state"):
            (count,) = struct.unpack(
                "<I", _read_exact(fh, 4, f"{section} count"))
            records: dict[str, np.ndarray] = {}
            for i in range(count):
                name, values = _read_record(fh, section)
                if name in records:
                    raise CheckpointError(
                        f"duplicate name {name!r} in {section}")
                records[name] = values
            out.append(records)
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError("trailing bytes after optimizer state")
    return out[0], out[1]


def save_checkpoint(path: str, psets, meta: dict[str, float]) -> None:
    """Save parameter sets plus AdamW state and scalar run metadata.

    ``psets`` is an iterable of :class:`~triad.layers.ParameterSet`; names
    are prefixed with each set's path name.
    """
    params: dict[str, np.ndarray] = {}
    state: dict[str, np.ndarray] = {}
    for pset in psets:
        for name, tensor in pset.params.items():
            params[f"{pset.name}.{name}"] = tensor.data
        for name in pset.params:
            state[f"opt.{pset.name}.m.{name}"] = pset.opt_m[name]
            state[f"opt.{pset.name}.v.{name}"] = pset.opt_v[name]
        state[f"opt.{pset.name}.step"] = np.float64(pset.step)
    for key, value in meta.items():
        state[f"meta.{key}"] = np.float64(value)
    write_records(path, params, state)


def load_checkpoint(path: str, psets) -> dict[str, float]:
    """Restore parameter sets in place; returns the metadata scalars."""
    params, state = read_records(path)
    for pset in psets:
        for name, tensor in pset.params.items():
            key = f"{pset.name}.{name}"
            if key not in params:
                raise CheckpointError(f"missing parameter record {key!r}")
            if params[key].shape != tensor.data.shape:
                raise CheckpointError(
                    f"shape mismatch for {key!r}: file has "
                    f"{params[key].shape}, model has {tensor.data.shape}")
            tensor.data = params[key].copy()
            pset.opt_m[name] = state[f"opt.{pset.name}.m.{name}"].copy()
            pset.opt_v[name] = state[f"opt.{pset.name}.v.{name}"].copy()
        pset.step = int(state[f"opt.{pset.name}.step"])
    return {key[len("meta."):]: float(value)
            for key, value in state.items() if key.startswith("meta.")}
