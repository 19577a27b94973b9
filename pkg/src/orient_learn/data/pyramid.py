"""Gaussian scale space shared by the detector and the patch samplers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..descriptor import SUPPORT_SCALE, PatchContext
from .images import GrayImage

SIGMA0 = 1.6
ASSUMED_BLUR = 0.5
LEVELS = 3
MIN_SIDE = 32


@dataclass
class Octave:
    images: list  # LEVELS + 3 Gaussian images
    sigmas: np.ndarray  # blur of each image in octave pixels
    factor: float  # full-resolution pixels per octave pixel


class Pyramid:
    """Octaves of progressively blurred images, halved in size between octaves."""

    def __init__(self, image, levels: int = LEVELS, sigma0: float = SIGMA0,
                 max_octaves: int | None = None):
        pixels = image.pixels if isinstance(image, GrayImage) else np.asarray(image, np.float64)
        self.levels = levels
        self.sigma0 = sigma0
        self.shape = pixels.shape
        k = 2.0 ** (1.0 / levels)
        sigmas = sigma0 * k ** np.arange(levels + 3)
        base = ndimage.gaussian_filter(pixels, math.sqrt(sigma0**2 - ASSUMED_BLUR**2))
        self.octaves: list[Octave] = []
        factor = 1.0
        while min(base.shape) >= MIN_SIDE:
            imgs = [base]
            for i in range(1, levels + 3):
                inc = math.sqrt(sigmas[i] ** 2 - sigmas[i - 1] ** 2)
                imgs.append(ndimage.gaussian_filter(imgs[-1], inc))
            self.octaves.append(Octave(imgs, sigmas, factor))
            if max_octaves is not None and len(self.octaves) >= max_octaves:
                break
            nxt = imgs[levels]
            h, w = (nxt.shape[0] // 2) * 2, (nxt.shape[1] // 2) * 2
            # 2x2 averaging keeps pixel centers aligned with x_coarse = x_fine / 2
            base = nxt[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
            factor *= 2.0

    def locate(self, sigma: float) -> tuple[int, int]:
        """Octave and level whose blur best matches a full-resolution scale."""
        o = int(np.clip(math.floor(math.log2(max(sigma, 1e-12) / self.sigma0)), 0,
                        len(self.octaves) - 1))
        local = sigma / self.octaves[o].factor
        level = int(np.clip(round(self.levels * math.log2(max(local, 1e-12) / self.sigma0)),
                            0, self.levels))
        return o, level

    def context(self, x: float, y: float, sigma: float, keypoint_id: int = 0,
                lam: float = SUPPORT_SCALE) -> PatchContext:
        o, level = self.locate(sigma)
        octave = self.octaves[o]
        f = octave.factor
        return PatchContext(octave.images[level], x / f, y / f, sigma / f, lam, keypoint_id)
