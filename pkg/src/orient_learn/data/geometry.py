"""Planar homographies and ground-truth keypoint correspondences."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import IngestionError


class Homography:
    """3x3 projective map, scaled so that h33 == 1 whenever h33 != 0."""

    def __init__(self, matrix):
        m = np.array(matrix, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise ValueError("homography has non-finite entries")
        if m[2, 2] != 0:
            m = m / m[2, 2]
        cond = np.linalg.cond(m)
        if not math.isfinite(cond) or cond > 1e14:
            raise ValueError(f"homography is singular (condition number {cond:.3g})")
        self.matrix = m

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def similarity(cls, angle: float, scale: float = 1.0, center=(0.0, 0.0),
                   shift=(0.0, 0.0)) -> "Homography":
        """``p' = center + shift + scale * R(angle) (p - center)``."""
        c, s = math.cos(angle) * scale, math.sin(angle) * scale
        cx, cy = center
        tx = cx + shift[0] - (c * cx - s * cy)
        ty = cy + shift[1] - (s * cx + c * cy)
        return cls([[c, -s, tx], [s, c, ty], [0.0, 0.0, 1.0]])

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.matrix @ other.matrix)

    def local_scale(self, x, y) -> np.ndarray:
        """Square root of the Jacobian determinant at each point."""
        m = self.matrix
        w = m[2, 0] * np.asarray(x, float) + m[2, 1] * np.asarray(y, float) + m[2, 2]
        return np.sqrt(np.abs(np.linalg.det(m) / w**3))


def map_point(h: Homography, x, y):
    """Apply ``h`` with the perspective divide.

    Returns ``(x', y', ok)``; ``ok`` is False where the point maps to
    infinity, and those coordinates are NaN.
    """
    m = h.matrix
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    u = m[0, 0] * x + m[0, 1] * y + m[0, 2]
    v = m[1, 0] * x + m[1, 1] * y + m[1, 2]
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    ok = np.abs(w) > 1e-12 * np.maximum(1.0, np.maximum(np.abs(u), np.abs(v)))
    safe = np.where(ok, w, 1.0)
    return np.where(ok, u / safe, np.nan), np.where(ok, v / safe, np.nan), ok


def load_homography(path) -> Homography:
    text = Path(path).read_text()
    try:
        values = [float(t) for t in text.split()]
    except ValueError as exc:
        raise IngestionError(f"{path}: {exc}") from None
    if len(values) != 9:
        raise IngestionError(f"{path}: expected 9 values, got {len(values)}")
    return Homography(values)


def save_homography(path, h: Homography) -> None:
    rows = [" ".join(repr(float(v)) for v in row) for row in h.matrix]
    Path(path).write_text("\n".join(rows) + "\n")


@dataclass
class CorrespondenceSet:
    pairs: list = field(default_factory=list)  # (index in A, index in B)
    homography: Homography | None = None

    def __len__(self) -> int:
        return len(self.pairs)

    def as_dict(self) -> dict[int, int]:
        return dict(self.pairs)


def build_correspondences(kps_a, kps_b, h: Homography, dist_thresh: float = 2.5,
                          max_scale_ratio: float = 1.5) -> CorrespondenceSet:
    """One-to-one ground-truth matches under ``h``.

    A candidate pair needs the larger of its forward (A mapped into B) and
    backward (B mapped into A) reprojection distances to be at most
    ``dist_thresh`` and a scale ratio within ``[1/max_scale_ratio,
    max_scale_ratio]``.  Candidates are accepted greedily by increasing
    distance.  Both criteria are symmetric in A/B, h/h^-1.
    """
    if not kps_a or not kps_b:
        return CorrespondenceSet([], h)
    a = np.array([[k.x, k.y, k.sigma] for k in kps_a])
    b = np.array([[k.x, k.y, k.sigma] for k in kps_b])
    hinv = h.inverse()
    ax, ay, aok = map_point(h, a[:, 0], a[:, 1])
    bx, by, bok = map_point(hinv, b[:, 0], b[:, 1])
    fwd = np.hypot(ax[:, None] - b[None, :, 0], ay[:, None] - b[None, :, 1])
    bwd = np.hypot(a[:, None, 0] - bx[None, :], a[:, None, 1] - by[None, :])
    dist = np.maximum(fwd, bwd)
    dist[~aok, :] = np.inf
    dist[:, ~bok] = np.inf
    dist = np.where(np.isnan(dist), np.inf, dist)

    scale_a = a[:, 2] * h.local_scale(a[:, 0], a[:, 1])   # A's scale seen in B
    scale_b = b[:, 2] * hinv.local_scale(b[:, 0], b[:, 1])  # B's scale seen in A
    ratio_fwd = b[None, :, 2] / scale_a[:, None]
    ratio_bwd = scale_b[None, :] / a[:, None, 2]
    log_ratio = 0.5 * (np.log(ratio_fwd) + np.log(ratio_bwd))
    ok = (dist <= dist_thresh) & (np.abs(log_ratio) <= math.log(max_scale_ratio))

    ii, jj = np.nonzero(ok)
    order = np.argsort(dist[ii, jj], kind="stable")
    used_a = np.zeros(len(kps_a), bool)
    used_b = np.zeros(len(kps_b), bool)
    pairs = []
    for t in order:
        i, j = int(ii[t]), int(jj[t])
        if used_a[i] or used_b[j]:
            continue
        used_a[i] = used_b[j] = True
        pairs.append((i, j))
    pairs.sort()
    return CorrespondenceSet(pairs, h)
