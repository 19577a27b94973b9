"""Training pairs and their binary container file.

Layout (little-endian)::

    magic "OLTP" | u32 version | u32 K | u32 dim | u32 side | u32 count
    count x record:
        f64[side*side] patch 1 | f64[side*side] patch 2
        table 1 | table 2        (i64 id, f64 x, f64 y, f64 sigma, f64[K*dim])
        f64 ground-truth rotation in radians (NaN when unknown)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from ..descriptor import (DIM, N_ANGLES, DescriptorTable, PatchContext, decode_table_record,
                          encode_table_record)
from ..errors import IngestionError, ShapeError
from .patches import PATCH_SIDE

DATASET_MAGIC = b"OLTP"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


@dataclass
class TrainingPair:
    """Two views of the same physical point.

    ``gt_rotation`` is the rotation of view 1 relative to view 2
    (radians), so ideal orientations satisfy ``theta1 - theta2 == gt``.  It
    is only used for evaluation, never by the loss.
    """

    patch1: np.ndarray
    patch2: np.ndarray
    table1: DescriptorTable
    table2: DescriptorTable
    gt_rotation: float = math.nan
    ctx1: PatchContext | None = field(default=None, repr=False, compare=False)
    ctx2: PatchContext | None = field(default=None, repr=False, compare=False)

    def swapped(self) -> "TrainingPair":
        return TrainingPair(self.patch2, self.patch1, self.table2, self.table1,
                            -self.gt_rotation, self.ctx2, self.ctx1)


def encode_dataset(pairs: list[TrainingPair]) -> bytes:
    K, dim, side = N_ANGLES, DIM, PATCH_SIDE
    if pairs:
        K, dim = pairs[0].table1.values.shape
        side = pairs[0].patch1.shape[0]
    out = [_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, K, dim, side, len(pairs))]
    for i, p in enumerate(pairs):
        for patch in (p.patch1, p.patch2):
            if patch.shape != (side, side):
                raise ShapeError(f"pair {i}: patch shape {patch.shape} != ({side}, {side})")
            out.append(np.ascontiguousarray(patch, dtype="<f8").tobytes())
        for table in (p.table1, p.table2):
            if table.values.shape != (K, dim):
                raise ShapeError(f"pair {i}: table shape {table.values.shape} != ({K}, {dim})")
            out.append(encode_table_record(table))
        out.append(struct.pack("<d", p.gt_rotation))
    return b"".join(out)


def decode_dataset(buf: bytes) -> list[TrainingPair]:
    if len(buf) < _HEADER.size:
        raise IngestionError("truncated dataset header", offset=len(buf))
    magic, version, K, dim, side, count = _HEADER.unpack_from(buf, 0)
    if magic != DATASET_MAGIC:
        raise IngestionError("not a training-pairs file (bad magic)", offset=0)
    if version != DATASET_VERSION:
        raise IngestionError(f"unsupported dataset version {version}", offset=4)
    pos = _HEADER.size
    npx = side * side
    pairs = []
    for i in range(count):
        if pos + 16 * npx > len(buf):
            raise IngestionError("truncated patches", offset=pos, record=i)
        p1 = np.frombuffer(buf, "<f8", npx, pos).astype(np.float64).reshape(side, side)
        p2 = np.frombuffer(buf, "<f8", npx, pos + 8 * npx).astype(np.float64).reshape(side, side)
        pos += 16 * npx
        t1, pos = decode_table_record(buf, pos, K, dim, i)
        t2, pos = decode_table_record(buf, pos, K, dim, i)
        if pos + 8 > len(buf):
            raise IngestionError("truncated ground-truth field", offset=pos, record=i)
        (gt,) = struct.unpack_from("<d", buf, pos)
        pos += 8
        pairs.append(TrainingPair(p1, p2, t1, t2, gt))
    if pos != len(buf):
        raise IngestionError("trailing bytes after last record", offset=pos)
    return pairs


def save_dataset(path, pairs: list[TrainingPair]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_dataset(pairs))


def load_dataset(path) -> list[TrainingPair]:
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())
