"""SIFT-style descriptor, rotation-sampled descriptor tables and their derivatives.

The trainer never calls :func:`extract` directly; it only sees
:class:`DescriptorTable` objects, so any descriptor that can fill a table
at the grid angles can be swapped in.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import IngestionError, ShapeError
from .sampling import bilinear, inside, rotated_grid

N_ANGLES = 72
ANGLE_STEP = 2 * math.pi / N_ANGLES
DIM = 128
SUPPORT_SCALE = 7.5
GRID = 16
CELLS = 4
BINS = 8
CLAMP = 0.2


@dataclass
class PatchContext:
    """Where to sample one keypoint: an image plus center and scale in its coordinates."""

    image: np.ndarray | None
    x: float
    y: float
    sigma: float
    lam: float = SUPPORT_SCALE
    keypoint_id: int = 0

    @property
    def radius(self) -> float:
        return self.lam * self.sigma

    @property
    def sample_radius(self) -> float:
        # outermost gradient sample of the descriptor grid, at any rotation
        spacing = 2.0 * self.radius / GRID
        return (GRID / 2 + 1) * spacing * math.sqrt(2.0)

    def is_valid(self) -> bool:
        if self.image is None or self.sigma <= 0:
            return False
        h, w = self.image.shape
        return inside(w, h, self.x, self.y, self.sample_radius)

    def check(self) -> None:
        if self.image is None:
            raise ValueError("patch context has no image attached")
        if not self.is_valid():
            h, w = self.image.shape
            raise ValueError(
                f"support radius {self.sample_radius:.2f} around ({self.x:.2f}, {self.y:.2f}) "
                f"leaves the {w}x{h} image"
            )


@lru_cache(maxsize=8)
def _spatial_weights(grid: int = GRID, cells: int = CELLS) -> np.ndarray:
    """(grid*grid, cells*cells) bilinear cell weights times the Gaussian window."""
    centers = (np.arange(grid) + 0.5) / (grid / cells) - 0.5
    c0 = np.floor(centers).astype(int)
    frac = centers - c0
    axis = np.zeros((grid, cells))
    for i in range(grid):
        for c, wgt in ((c0[i], 1.0 - frac[i]), (c0[i] + 1, frac[i])):
            if 0 <= c < cells:
                axis[i, c] += wgt
    # Gaussian with sigma equal to half the window width, in sample units
    half = grid / 2.0
    offs = np.arange(grid) - (grid - 1) / 2.0
    gauss = np.exp(-(offs[:, None] ** 2 + offs[None, :] ** 2) / (2.0 * half**2))
    w = np.einsum("vc,ud->vucd", axis, axis) * gauss[:, :, None, None]
    return w.reshape(grid * grid, cells * cells)


def _unit(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    return np.where(norms > 1e-12, rows / np.where(norms > 1e-12, norms, 1.0), 0.0)


def _normalize(raw: np.ndarray) -> np.ndarray:
    """Unit-normalize, clamp entries at 0.2, renormalize (one pass, as in SIFT)."""
    return _unit(np.minimum(_unit(raw), CLAMP))


def extract_many(ctx: PatchContext, thetas) -> np.ndarray:
    """Descriptors of one keypoint at each orientation in ``thetas`` (K, 128)."""
    ctx.check()
    thetas = np.mod(np.atleast_1d(np.asarray(thetas, dtype=np.float64)), 2 * math.pi)
    spacing = 2.0 * ctx.radius / GRID
    offsets = (np.arange(-1, GRID + 1) - (GRID - 1) / 2.0) * spacing
    xs, ys = rotated_grid(ctx.x, ctx.y, offsets, thetas)
    vals = bilinear(ctx.image, xs, ys)  # K, G+2, G+2 (rows = v, cols = u)
    gu = (vals[:, 1:-1, 2:] - vals[:, 1:-1, :-2]) / (2.0 * spacing)
    gv = (vals[:, 2:, 1:-1] - vals[:, :-2, 1:-1]) / (2.0 * spacing)
    mag = np.hypot(gu, gv).reshape(len(thetas), -1)
    ori = np.mod(np.arctan2(gv, gu), 2 * math.pi).reshape(len(thetas), -1)

    pos = ori * (BINS / (2 * math.pi))
    b0 = np.floor(pos).astype(np.intp) % BINS
    frac = pos - np.floor(pos)
    obins = np.zeros(mag.shape + (BINS,))
    np.put_along_axis(obins, b0[..., None], ((1.0 - frac) * mag)[..., None], axis=-1)
    b1 = (b0 + 1) % BINS
    extra = np.take_along_axis(obins, b1[..., None], axis=-1) + (frac * mag)[..., None]
    np.put_along_axis(obins, b1[..., None], extra, axis=-1)

    hist = np.einsum("sc,ksb->kcb", _spatial_weights(), obins)
    return _normalize(hist.reshape(len(thetas), CELLS * CELLS * BINS))


def extract(ctx: PatchContext, theta: float) -> np.ndarray:
    """128-d descriptor of the support region rotated by ``theta``."""
    return extract_many(ctx, [theta])[0]


@dataclass
class DescriptorTable:
    """Descriptors of one keypoint at ``K`` evenly spaced orientations starting at 0."""

    values: np.ndarray
    keypoint_id: int = 0
    x: float = 0.0
    y: float = 0.0
    sigma: float = 0.0

    @property
    def K(self) -> int:
        return self.values.shape[0]

    @property
    def step(self) -> float:
        return 2 * math.pi / self.K


def build_table(ctx: PatchContext, n_angles: int = N_ANGLES) -> DescriptorTable:
    angles = np.arange(n_angles) * (2 * math.pi / n_angles)
    return DescriptorTable(extract_many(ctx, angles), ctx.keypoint_id, ctx.x, ctx.y, ctx.sigma)


def _values(table) -> np.ndarray:
    return table.values if isinstance(table, DescriptorTable) else np.asarray(table, np.float64)


def _bracket(values: np.ndarray, theta):
    K = values.shape[-2]
    step = 2 * math.pi / K
    theta = np.asarray(theta, dtype=np.float64)
    lead = np.broadcast_shapes(values.shape[:-2], theta.shape)
    values = np.broadcast_to(values, lead + values.shape[-2:])
    pos = np.mod(np.broadcast_to(theta, lead), 2 * math.pi) / step
    snapped = np.abs(pos - np.round(pos)) < 1e-9
    pos = np.where(snapped, np.round(pos), pos)
    base = np.floor(pos)
    t = pos - base
    k0 = base.astype(np.intp) % K
    k1 = (k0 + 1) % K
    g0 = np.take_along_axis(values, k0[..., None, None], axis=-2)[..., 0, :]
    g1 = np.take_along_axis(values, k1[..., None, None], axis=-2)[..., 0, :]
    return g0, g1, t[..., None], step


def lookup(table, theta) -> np.ndarray:
    """Descriptor at a continuous angle by linear interpolation plus renormalization.

    ``table`` is a :class:`DescriptorTable` or an array of shape (..., K, D)
    with ``theta`` broadcasting against the leading dims.
    """
    values = _values(table)
    g0, g1, t, _ = _bracket(values, theta)
    mixed = (1.0 - t) * g0 + t * g1
    norm = np.linalg.norm(mixed, axis=-1, keepdims=True)
    return np.where(norm > 0, mixed / np.where(norm > 0, norm, 1.0), 0.0)


def lookup_derivative(table, theta) -> np.ndarray:
    """Exact derivative of :func:`lookup` with respect to ``theta``.

    Inside a grid segment this is the adjacent-entry difference quotient
    projected through the renormalization.  At grid angles the right-hand
    segment is used.
    """
    values = _values(table)
    g0, g1, t, step = _bracket(values, theta)
    mixed = (1.0 - t) * g0 + t * g1
    norm = np.linalg.norm(mixed, axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    unit = mixed / safe
    slope = (g1 - g0) / step
    radial = np.sum(unit * slope, axis=-1, keepdims=True)
    return np.where(norm > 0, (slope - unit * radial) / safe, 0.0)


def jacobian(table, theta) -> np.ndarray:
    """Central difference of :func:`lookup` with a step of one table interval."""
    values = _values(table)
    step = 2 * math.pi / values.shape[-2]
    theta = np.asarray(theta, dtype=np.float64)
    return (lookup(values, theta + step) - lookup(values, theta - step)) / (2.0 * step)


# ---------------------------------------------------------------------------
# table container files
# ---------------------------------------------------------------------------

TABLE_MAGIC = b"OLDT"
TABLE_VERSION = 1
_RECORD_HEAD = struct.Struct("<qddd")


def encode_table_record(table: DescriptorTable) -> bytes:
    head = _RECORD_HEAD.pack(table.keypoint_id, table.x, table.y, table.sigma)
    return head + np.ascontiguousarray(table.values, dtype="<f8").tobytes()


def decode_table_record(buf: bytes, pos: int, K: int, dim: int, record: int):
    need = _RECORD_HEAD.size + 8 * K * dim
    if pos + need > len(buf):
        raise IngestionError("truncated descriptor table", offset=pos, record=record)
    kid, x, y, sigma = _RECORD_HEAD.unpack_from(buf, pos)
    pos += _RECORD_HEAD.size
    values = np.frombuffer(buf, dtype="<f8", count=K * dim, offset=pos).astype(np.float64)
    pos += 8 * K * dim
    return DescriptorTable(values.reshape(K, dim), kid, x, y, sigma), pos


def save_tables(path, tables: list[DescriptorTable]) -> None:
    K = tables[0].K if tables else N_ANGLES
    dim = tables[0].values.shape[1] if tables else DIM
    with open(path, "wb") as fh:
        fh.write(TABLE_MAGIC + struct.pack("<IIII", TABLE_VERSION, K, dim, len(tables)))
        for t in tables:
            if t.values.shape != (K, dim):
                raise ShapeError(f"table {t.keypoint_id} has shape {t.values.shape}")
            fh.write(encode_table_record(t))


def load_tables(path) -> list[DescriptorTable]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != TABLE_MAGIC:
        raise IngestionError("not a descriptor-table file (bad magic)", offset=0)
    if len(buf) < 20:
        raise IngestionError("truncated header", offset=len(buf))
    version, K, dim, count = struct.unpack_from("<IIII", buf, 4)
    if version != TABLE_VERSION:
        raise IngestionError(f"unsupported table file version {version}", offset=4)
    pos = 20
    tables = []
    for i in range(count):
        table, pos = decode_table_record(buf, pos, K, dim, i)
        tables.append(table)
    if pos != len(buf):
        raise IngestionError("trailing bytes after last table", offset=pos)
    return tables
