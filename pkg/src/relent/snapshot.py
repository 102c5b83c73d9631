"""Binary field snapshots and checkpoints.

Layout: a 32-byte little-endian header

    magic   8 bytes  b"RELENT01"
    dim     uint32
    n       uint32
    rank    uint32   tensor rank of every record
    count   uint32   number of records
    pad     8 bytes  zero

followed by ``count`` records of ``dim**rank * n**dim`` little-endian float64
values in row-major order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import UsageError
from .grid import Grid

MAGIC = b"RELENT01"
_HEADER = struct.Struct("<8sIIII8x")
assert _HEADER.size == 32


def write_snapshot(path, grid: Grid, records, rank: int = 0) -> Path:
    path = Path(path)
    arrays = [np.asarray(r, dtype="<f8") for r in records]
    expected = (grid.dim,) * rank + grid.shape
    for a in arrays:
        if a.shape != expected:
            raise UsageError(f"record shape {a.shape} does not match {expected}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, grid.dim, grid.n, rank, len(arrays)))
        for a in arrays:
            fh.write(np.ascontiguousarray(a).tobytes(order="C"))
    return path


def read_snapshot(path, length: float = 2.0):
    """Return ``(grid, rank, records)``; the axis length is not stored."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise UsageError(f"{path}: truncated header")
    magic, dim, n, rank, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise UsageError(f"{path}: bad magic {magic!r}")
    grid = Grid(dim, n, length)
    shape = (dim,) * rank + grid.shape
    size = int(np.prod(shape))
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if body.size != size * count:
        raise UsageError(f"{path}: expected {size * count} values, found {body.size}")
    records = [body[i * size:(i + 1) * size].reshape(shape).astype(float) for i in range(count)]
    return grid, rank, records


def write_checkpoint(stem, grid: Grid, state, meta: dict) -> tuple[Path, Path]:
    """Write ``stem.bin`` (density then momentum components) and ``stem.json``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    records = [state.rho] + [state.mom[i] for i in range(grid.dim)]
    bin_path = write_snapshot(stem.with_suffix(".bin"), grid, records, rank=0)
    sidecar = dict(meta)
    sidecar.update(t=float(state.t), length=grid.length)
    json_path = stem.with_suffix(".json")
    json_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True, default=str))
    return bin_path, json_path


def read_checkpoint(stem):
    from .cns import State

    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    grid, _, records = read_snapshot(stem.with_suffix(".bin"), length=meta.get("length", 2.0))
    state = State(t=meta["t"], rho=records[0], mom=np.stack(records[1:]))
    return grid, state, meta
