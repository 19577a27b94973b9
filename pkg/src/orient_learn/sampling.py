"""Bilinear sampling on rotated grids.

Continuous image coordinates put pixel centers at ``index + 0.5``, so the
image ``[0, W] x [0, H]`` is covered exactly and pixel (r, c) sits at
``(c + 0.5, r + 0.5)``.
"""

from __future__ import annotations

import numpy as np


def bilinear(image: np.ndarray, xs, ys) -> np.ndarray:
    """Sample ``image`` at continuous coordinates; points outside are clamped."""
    h, w = image.shape
    fx = np.asarray(xs, dtype=np.float64) - 0.5
    fy = np.asarray(ys, dtype=np.float64) - 0.5
    fx = np.clip(fx, 0.0, w - 1.0)
    fy = np.clip(fy, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(fx).astype(np.intp), w - 2) if w > 1 else np.zeros(fx.shape, np.intp)
    y0 = np.minimum(np.floor(fy).astype(np.intp), h - 2) if h > 1 else np.zeros(fy.shape, np.intp)
    tx = fx - x0
    ty = fy - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = image[y0, x0] * (1.0 - tx) + image[y0, x1] * tx
    bottom = image[y1, x0] * (1.0 - tx) + image[y1, x1] * tx
    return top * (1.0 - ty) + bottom * ty


def rotated_grid(cx: float, cy: float, offsets, theta) -> tuple[np.ndarray, np.ndarray]:
    """Coordinates of a square grid rotated by ``theta`` about ``(cx, cy)``.

    ``offsets`` are the 1-D sample offsets along each patch axis.  ``theta``
    may be an array; the result is shaped ``theta.shape + (n, n)`` with rows
    indexed by the patch v-axis and columns by the u-axis.
    """
    theta = np.asarray(theta, dtype=np.float64)
    c = np.cos(theta)[..., None, None]
    s = np.sin(theta)[..., None, None]
    u = np.asarray(offsets, dtype=np.float64)[None, :]
    v = np.asarray(offsets, dtype=np.float64)[:, None]
    xs = cx + c * u - s * v
    ys = cy + s * u + c * v
    return xs, ys


def inside(width: int, height: int, cx: float, cy: float, radius: float) -> bool:
    """True when a disc of ``radius`` around the center can be sampled without clamping."""
    lo = 0.5
    return (cx - radius >= lo and cy - radius >= lo
            and cx + radius <= width - lo and cy + radius <= height - lo)
