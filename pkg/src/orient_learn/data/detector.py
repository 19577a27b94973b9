"""Difference-of-Gaussians keypoints with a SIFT-style dominant orientation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from ..errors import IngestionError
from .images import GrayImage
from .pyramid import Pyramid

CONTRAST_THRESHOLD = 0.04
EDGE_RATIO = 10.0
BORDER = 5
ORI_BINS = 36


@dataclass
class Keypoint:
    x: float
    y: float
    sigma: float
    response: float = 0.0
    orientation: float = 0.0  # radians, detector reference orientation

    def __post_init__(self):
        for name in ("x", "y", "sigma", "response", "orientation"):
            setattr(self, name, float(getattr(self, name)))
        if not self.sigma > 0:
            raise ValueError(f"keypoint scale must be positive, got {self.sigma}")


def _refine(dogs, s, y, x, levels):
    """Quadratic fit around a DoG extremum; None when it drifts off or is too weak."""
    n_s, h, w = dogs.shape
    for _ in range(5):
        c = dogs[s, y, x]
        g = 0.5 * np.array([
            dogs[s, y, x + 1] - dogs[s, y, x - 1],
            dogs[s, y + 1, x] - dogs[s, y - 1, x],
            dogs[s + 1, y, x] - dogs[s - 1, y, x],
        ])
        dxx = dogs[s, y, x + 1] + dogs[s, y, x - 1] - 2 * c
        dyy = dogs[s, y + 1, x] + dogs[s, y - 1, x] - 2 * c
        dss = dogs[s + 1, y, x] + dogs[s - 1, y, x] - 2 * c
        dxy = 0.25 * (dogs[s, y + 1, x + 1] - dogs[s, y + 1, x - 1]
                      - dogs[s, y - 1, x + 1] + dogs[s, y - 1, x - 1])
        dxs = 0.25 * (dogs[s + 1, y, x + 1] - dogs[s + 1, y, x - 1]
                      - dogs[s - 1, y, x + 1] + dogs[s - 1, y, x - 1])
        dys = 0.25 * (dogs[s + 1, y + 1, x] - dogs[s + 1, y - 1, x]
                      - dogs[s - 1, y + 1, x] + dogs[s - 1, y - 1, x])
        hess = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
        try:
            offset = -np.linalg.solve(hess, g)
        except np.linalg.LinAlgError:
            return None
        # a little past 0.5 so a peak split evenly between two pixels settles
        if np.all(np.abs(offset) < 0.6):
            break
        x += int(round(offset[0]))
        y += int(round(offset[1]))
        s += int(round(offset[2]))
        if not (1 <= s <= levels and BORDER <= x < w - BORDER and BORDER <= y < h - BORDER):
            return None
    else:
        return None
    value = c + 0.5 * g @ offset
    if abs(value) * levels < CONTRAST_THRESHOLD:
        return None
    tr = dxx + dyy
    det = dxx * dyy - dxy * dxy
    if det <= 0 or tr * tr * EDGE_RATIO >= (EDGE_RATIO + 1) ** 2 * det:
        return None
    return s, y, x, offset, value


def dominant_orientation(image: np.ndarray, x: float, y: float, sigma: float) -> float:
    """Peak of a 36-bin Gaussian-weighted gradient histogram, parabola-refined.

    ``x, y, sigma`` are in the coordinates of ``image`` (continuous, pixel
    centers at +0.5).  Returns radians in [0, 2*pi).
    """
    h, w = image.shape
    win_sigma = 1.5 * sigma
    radius = int(round(3 * win_sigma))
    cx, cy = int(math.floor(x)), int(math.floor(y))
    x0, x1 = max(cx - radius, 1), min(cx + radius, w - 2)
    y0, y1 = max(cy - radius, 1), min(cy + radius, h - 2)
    if x1 < x0 or y1 < y0:
        return 0.0
    rows = np.arange(y0, y1 + 1)
    cols = np.arange(x0, x1 + 1)
    gx = image[y0 : y1 + 1, x0 + 1 : x1 + 2] - image[y0 : y1 + 1, x0 - 1 : x1]
    gy = image[y0 + 1 : y1 + 2, x0 : x1 + 1] - image[y0 - 1 : y1, x0 : x1 + 1]
    dx = cols[None, :] + 0.5 - x
    dy = rows[:, None] + 0.5 - y
    weight = np.exp(-(dx**2 + dy**2) / (2 * win_sigma**2))
    mag = np.hypot(gx, gy) * weight
    ang = np.mod(np.arctan2(gy, gx), 2 * math.pi)
    pos = ang.ravel() * ORI_BINS / (2 * math.pi)
    b0 = np.floor(pos).astype(int)
    frac = pos - b0
    hist = np.bincount(b0 % ORI_BINS, weights=mag.ravel() * (1 - frac), minlength=ORI_BINS)
    hist += np.bincount((b0 + 1) % ORI_BINS, weights=mag.ravel() * frac, minlength=ORI_BINS)
    kernel = np.array([1, 4, 6, 4, 1]) / 16.0
    for _ in range(2):
        hist = np.convolve(np.concatenate([hist[-2:], hist, hist[:2]]), kernel, "valid")
    k = int(hist.argmax())
    if hist[k] <= 0:
        return 0.0
    left, right = hist[k - 1], hist[(k + 1) % ORI_BINS]
    denom = left - 2 * hist[k] + right
    offset = 0.5 * (left - right) / denom if denom != 0 else 0.0
    return float(np.mod((k + offset) * 2 * math.pi / ORI_BINS, 2 * math.pi))


def _dedupe(kps: list[Keypoint]) -> list[Keypoint]:
    """Drop keypoints that repeat a stronger one at (almost) the same place and scale."""
    if len(kps) < 2:
        return kps
    pts = np.array([[k.x, k.y] for k in kps])
    tree = cKDTree(pts)
    removed = np.zeros(len(kps), bool)
    for i, k in enumerate(kps):
        if removed[i]:
            continue
        for j in tree.query_ball_point(pts[i], 1.0):
            if j > i and not removed[j] and abs(math.log2(kps[j].sigma / k.sigma)) < 0.25:
                removed[j] = True
    return [k for k, r in zip(kps, removed) if not r]


def detect_keypoints(img, max_count: int | None = 1000, pyramid: Pyramid | None = None
                     ) -> list[Keypoint]:
    """Multi-octave DoG extrema sorted by |response|, truncated to ``max_count``."""
    pyr = pyramid if pyramid is not None else Pyramid(img)
    levels = pyr.levels
    found: list[Keypoint] = []
    for octave in pyr.octaves:
        dogs = np.stack([b - a for a, b in zip(octave.images[:-1], octave.images[1:])])
        n_s, h, w = dogs.shape
        if h <= 2 * BORDER or w <= 2 * BORDER:
            continue
        prelim = 0.5 * CONTRAST_THRESHOLD / levels
        is_max = dogs == ndimage.maximum_filter(dogs, size=3, mode="nearest")
        is_min = dogs == ndimage.minimum_filter(dogs, size=3, mode="nearest")
        cand = (is_max | is_min) & (np.abs(dogs) > prelim)
        cand[0] = cand[-1] = False
        cand[:, :BORDER] = cand[:, -BORDER:] = False
        cand[:, :, :BORDER] = cand[:, :, -BORDER:] = False
        for s, y, x in zip(*np.nonzero(cand)):
            refined = _refine(dogs, int(s), int(y), int(x), levels)
            if refined is None:
                continue
            s2, y2, x2, off, value = refined
            f = octave.factor
            local_sigma = pyr.sigma0 * 2.0 ** ((s2 + off[2]) / levels)
            ox, oy = x2 + 0.5 + off[0], y2 + 0.5 + off[1]
            level_img = octave.images[int(np.clip(round(s2 + off[2]), 0, levels + 2))]
            ori = dominant_orientation(level_img, ox, oy, local_sigma)
            found.append(Keypoint(ox * f, oy * f, local_sigma * f, float(value), ori))
    found.sort(key=lambda k: (-abs(k.response), k.y, k.x))
    found = _dedupe(found)
    if max_count is not None:
        found = found[:max_count]
    return found


def save_keypoints(path, keypoints: list[Keypoint]) -> None:
    """One keypoint per line: ``x y sigma response orientation_degrees``."""
    lines = [f"{k.x!r} {k.y!r} {k.sigma!r} {k.response!r} {math.degrees(k.orientation)!r}"
             for k in keypoints]
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_keypoints(path) -> list[Keypoint]:
    kps = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 5:
            raise IngestionError(f"{path}:{lineno}: expected 5 fields, got {len(fields)}")
        try:
            x, y, sigma, response, ori = (float(f) for f in fields)
            kps.append(Keypoint(x, y, sigma, response, math.radians(ori)))
        except ValueError as exc:
            raise IngestionError(f"{path}:{lineno}: {exc}") from None
    return kps
