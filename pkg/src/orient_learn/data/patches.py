"""28x28 network input patches sampled on the descriptor's support region."""

from __future__ import annotations

import numpy as np

from ..descriptor import SUPPORT_SCALE, PatchContext
from ..sampling import bilinear, rotated_grid
from .detector import Keypoint
from .images import GrayImage

PATCH_SIDE = 28


class RejectedKeypoint(ValueError):
    """The keypoint's support region does not fit inside the image."""


def standardize(patch: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance; (numerically) constant patches become zeros."""
    centered = patch - patch.mean()
    std = np.sqrt(np.mean(centered * centered))
    if std < 1e-10:
        return np.zeros_like(patch)
    return centered / std


def patch_from_context(ctx: PatchContext, theta: float = 0.0, side: int = PATCH_SIDE
                       ) -> np.ndarray:
    if not ctx.is_valid():
        raise RejectedKeypoint(
            f"support of keypoint {ctx.keypoint_id} at ({ctx.x:.1f}, {ctx.y:.1f}) leaves the image"
        )
    spacing = 2.0 * ctx.radius / side
    offsets = (np.arange(side) - (side - 1) / 2.0) * spacing
    xs, ys = rotated_grid(ctx.x, ctx.y, offsets, theta)
    return standardize(bilinear(ctx.image, xs, ys))


def extract_patch(img, kp: Keypoint, theta: float = 0.0, lam: float = SUPPORT_SCALE
                  ) -> np.ndarray:
    """Sample ``img`` directly on a 28x28 grid of side ``2*lam*sigma`` rotated by ``theta``.

    No smoothing is applied; the pipeline passes pre-blurred pyramid levels
    through :func:`patch_from_context` instead.
    """
    pixels = img.pixels if isinstance(img, GrayImage) else np.asarray(img, np.float64)
    ctx = PatchContext(pixels, kp.x, kp.y, kp.sigma, lam)
    return patch_from_context(ctx, theta)
