"""Synthetic training pairs: warped copies of base images with known rotation."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..descriptor import SUPPORT_SCALE, build_table
from ..errors import IngestionError
from ..sampling import bilinear
from .dataset import TrainingPair
from .detector import Keypoint, detect_keypoints
from .geometry import Homography, map_point
from .images import GrayImage
from .patches import patch_from_context
from .pyramid import Pyramid

log = logging.getLogger(__name__)


def worker_count() -> int:
    env = os.environ.get("ORIENT_LEARN_THREADS")
    n = os.cpu_count() or 1
    if env:
        try:
            n = min(n, max(1, int(env)))
        except ValueError:
            log.warning("ignoring non-integer ORIENT_LEARN_THREADS=%r", env)
    return n


@dataclass
class Perturbation:
    scale_jitter: float = 0.1  # scale drawn log-uniformly in [1/(1+j), 1+j]
    gain_jitter: float = 0.1
    bias_jitter: float = 0.05
    noise: float = 0.01

    @classmethod
    def none(cls) -> "Perturbation":
        return cls(0.0, 0.0, 0.0, 0.0)


def warp_image(pixels: np.ndarray, h: Homography) -> np.ndarray:
    """Render ``pixels`` under ``h`` on a canvas of the same size (border clamped)."""
    rows, cols = pixels.shape
    ys, xs = np.mgrid[0:rows, 0:cols].astype(np.float64) + 0.5
    sx, sy, _ = map_point(h.inverse(), xs, ys)
    return bilinear(pixels, sx, sy)


def _usable(pyr: Pyramid, kps: list[Keypoint], lam: float) -> list[Keypoint]:
    return [k for k in kps if pyr.context(k.x, k.y, k.sigma, lam=lam).is_valid()]


def synth_pairs(base_images, n_pairs: int, rng: np.random.Generator,
                max_rotation: float = 45.0, perturbation: Perturbation | None = None,
                per_copy: int = 4, max_keypoints: int = 1000, lam: float = SUPPORT_SCALE
                ) -> list[TrainingPair]:
    """Pair keypoints of ``base_images`` with their own warped copies.

    Each warped copy rotates a base image about its center by an angle drawn
    uniformly from ``[-max_rotation, max_rotation]`` degrees, optionally
    rescales it and perturbs intensities, and contributes up to ``per_copy``
    pairs.  View 1 is the warped copy, view 2 the base image.
    """
    if n_pairs < 0:
        raise ValueError("n_pairs must be non-negative")
    if n_pairs == 0:
        return []
    if not base_images:
        raise IngestionError("no base images given")
    pert = perturbation if perturbation is not None else Perturbation()
    bases = []
    for img in base_images:
        pixels = img.pixels if isinstance(img, GrayImage) else np.asarray(img, np.float64)
        pyr = Pyramid(pixels)
        kps = _usable(pyr, detect_keypoints(pixels, max_keypoints, pyramid=pyr), lam)
        bases.append((pixels, pyr, kps))
    if not any(b[2] for b in bases):
        raise IngestionError("base images yield no usable keypoints")
    choices = [i for i, b in enumerate(bases) if b[2]]

    jobs = []
    attempts = 0
    while len(jobs) < n_pairs:
        attempts += 1
        if attempts > 50 * n_pairs + 100:
            raise IngestionError(f"could only form {len(jobs)} of {n_pairs} pairs")
        pixels, pyr, kps = bases[choices[int(rng.integers(len(choices)))]]
        phi = math.radians(rng.uniform(-max_rotation, max_rotation)) if max_rotation else 0.0
        j = pert.scale_jitter
        scale = math.exp(rng.uniform(-math.log1p(j), math.log1p(j))) if j else 1.0
        rows, cols = pixels.shape
        h = Homography.similarity(phi, scale, center=(cols / 2.0, rows / 2.0))
        warped = warp_image(pixels, h)
        if pert.gain_jitter or pert.bias_jitter or pert.noise:
            gain = 1.0 + rng.uniform(-pert.gain_jitter, pert.gain_jitter)
            bias = rng.uniform(-pert.bias_jitter, pert.bias_jitter)
            warped = gain * warped + bias + pert.noise * rng.standard_normal(warped.shape)
            warped = np.clip(warped, 0.0, 1.0)
        wpyr = Pyramid(warped)
        picks = rng.choice(len(kps), size=min(per_copy, len(kps)), replace=False)
        for k in np.sort(picks):
            kp = kps[int(k)]
            wx, wy, ok = map_point(h, kp.x, kp.y)
            if not ok:
                continue
            ctx1 = wpyr.context(float(wx), float(wy), kp.sigma * scale, len(jobs), lam)
            if not ctx1.is_valid():
                continue
            ctx2 = pyr.context(kp.x, kp.y, kp.sigma, len(jobs), lam)
            jobs.append((ctx1, ctx2, phi))
            if len(jobs) == n_pairs:
                break

    def make(job):
        ctx1, ctx2, phi = job
        return TrainingPair(patch_from_context(ctx1), patch_from_context(ctx2),
                            build_table(ctx1), build_table(ctx2), phi, ctx1, ctx2)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        return list(pool.map(make, jobs))
