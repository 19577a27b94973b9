"""Nearest-neighbor matching, precision-recall, mAP and orientation-method comparisons."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import descriptor
from .data.detector import detect_keypoints
from .data.geometry import Homography, build_correspondences
from .data.images import GrayImage
from .data.patches import patch_from_context
from .data.pyramid import Pyramid
from .errors import ShapeError

log = logging.getLogger(__name__)

METHODS = ("dominant", "upright", "learned")


class NoCorrespondences(ValueError):
    """The image pair has no ground-truth correspondences."""


@dataclass
class MatchSet:
    """Matches sorted by ascending distance (ties keep query order)."""

    query: np.ndarray
    matched: np.ndarray
    distance: np.ndarray
    correct: np.ndarray

    def __len__(self) -> int:
        return len(self.query)

    def rows(self) -> list[tuple[int, int, float, bool]]:
        return [(int(q), int(m), float(d), bool(c))
                for q, m, d, c in zip(self.query, self.matched, self.distance, self.correct)]


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    total_positives: int

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recall.tolist(), self.precision.tolist()))


def _as_matrix(d) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if d.ndim == 1 and d.size == 0:
        return d.reshape(0, 0)
    if d.ndim != 2:
        raise ShapeError(f"descriptor set must be 2-D, got shape {d.shape}")
    return d


def nn_match(desc_a, desc_b, truth: dict[int, int] | None = None, chunk: int = 256) -> MatchSet:
    """Match every row of ``desc_a`` to its Euclidean nearest row of ``desc_b``.

    ``truth`` maps query index to its correct index in B; matches of queries
    absent from it are incorrect.
    """
    a, b = _as_matrix(desc_a), _as_matrix(desc_b)
    if len(b) == 0:
        raise ValueError("nn_match needs a non-empty second descriptor set")
    if len(a) and a.shape[1] != b.shape[1]:
        raise ShapeError(f"descriptor dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    idx = np.zeros(len(a), dtype=np.intp)
    dist = np.zeros(len(a))
    for start in range(0, len(a), chunk):
        block = a[start : start + chunk]
        d = np.sqrt(np.sum((block[:, None, :] - b[None, :, :]) ** 2, axis=2))
        best = np.argmin(d, axis=1)  # first (lowest) index on ties
        idx[start : start + len(block)] = best
        dist[start : start + len(block)] = d[np.arange(len(block)), best]
    truth = truth or {}
    correct = np.array([truth.get(q, -1) == m for q, m in enumerate(idx.tolist())], dtype=bool)
    order = np.argsort(dist, kind="stable")
    return MatchSet(np.arange(len(a))[order], idx[order], dist[order], correct[order])


def pr_curve(matches: MatchSet, total_positives: int) -> PRCurve:
    """Precision and recall after each match in distance order."""
    if total_positives < 1:
        raise ValueError("pr_curve needs at least one positive")
    hits = np.cumsum(matches.correct.astype(np.int64))
    returned = np.arange(1, len(matches) + 1)
    return PRCurve(hits / total_positives, hits / np.maximum(returned, 1), int(total_positives))


def average_precision(curve: PRCurve) -> float:
    """Trapezoid area under precision(recall) from recall 0 to the last achieved recall.

    The first point's precision is extended back to recall 0.
    """
    if len(curve.recall) == 0:
        return 0.0
    r = np.concatenate([[0.0], curve.recall])
    p = np.concatenate([[curve.precision[0]], curve.precision])
    return float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2.0))


def mean_ap(curves: list[PRCurve]) -> float:
    if not curves:
        raise ValueError("mean_ap needs at least one curve")
    return float(np.mean([average_precision(c) for c in curves]))


@dataclass
class EvalReport:
    """Per-sequence AP per method, plus match/positive counts."""

    rows: list[dict] = field(default_factory=list)

    def add(self, sequence: str, method: str, ap: float, matches: int, positives: int) -> None:
        self.rows.append(dict(sequence=sequence, method=method, ap=ap, matches=matches,
                              positives=positives))

    @property
    def sequences(self) -> list[str]:
        return list(dict.fromkeys(r["sequence"] for r in self.rows))

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(r["method"] for r in self.rows))

    def ap(self, sequence: str, method: str) -> float:
        for r in self.rows:
            if r["sequence"] == sequence and r["method"] == method:
                return r["ap"]
        raise KeyError((sequence, method))

    def sequence_map(self) -> dict[str, dict[str, float]]:
        """sequence -> method -> mean AP over that sequence's image pairs."""
        acc: dict[str, dict[str, list[float]]] = {}
        for r in self.rows:
            acc.setdefault(r["sequence"], {}).setdefault(r["method"], []).append(r["ap"])
        return {s: {m: float(np.mean(v)) for m, v in ms.items()} for s, ms in acc.items()}

    def mean_ap(self) -> dict[str, float]:
        seq = self.sequence_map()
        return {m: float(np.mean([seq[s][m] for s in seq if m in seq[s]])) for m in self.methods}


def rank_methods(report: EvalReport) -> dict[str, float]:
    """Average over sequences of each method's rank by mAP (1 = best, ties share the mean rank)."""
    seq = report.sequence_map()
    methods = report.methods
    if not seq:
        raise ValueError("empty report")
    totals = dict.fromkeys(methods, 0.0)
    for s, by_method in seq.items():
        missing = [m for m in methods if m not in by_method]
        if missing:
            raise ValueError(f"sequence {s!r} lacks results for {', '.join(missing)}")
        ranks = rankdata([-by_method[m] for m in methods], method="average")
        for m, r in zip(methods, ranks):
            totals[m] += float(r)
    return {m: totals[m] / len(seq) for m in methods}


def _contexts(pyr: Pyramid, kps, lam: float):
    kept, ctxs = [], []
    for k in kps:
        ctx = pyr.context(k.x, k.y, k.sigma, len(kept), lam)
        if ctx.is_valid():
            kept.append(k)
            ctxs.append(ctx)
    return kept, ctxs


def method_orientations(method: str, kps, ctxs, net=None) -> np.ndarray:
    if method == "dominant":
        return np.array([k.orientation for k in kps], dtype=np.float64)
    if method == "upright":
        return np.zeros(len(kps))
    if method == "learned":
        if net is None:
            raise ValueError("the learned method needs a network")
        if not ctxs:
            return np.zeros(0)
        net.eval()
        patches = np.stack([patch_from_context(c) for c in ctxs])[:, None]
        theta, _ = net.predict_orientation(patches)
        return theta
    raise ValueError(f"unknown orientation method {method!r}")


def _describe(ctxs, thetas) -> np.ndarray:
    if not ctxs:
        return np.zeros((0, descriptor.DIM))
    return np.stack([descriptor.extract(c, float(t)) for c, t in zip(ctxs, thetas)])


def evaluate_methods(image_a, image_b, h: Homography, net=None, methods=METHODS,
                     max_keypoints: int = 1000, lam: float = descriptor.SUPPORT_SCALE,
                     dist_thresh: float = 2.5) -> dict[str, dict]:
    """AP of each orientation method on one image pair related by ``h`` (A to B).

    Returns ``{method: {"ap", "matches", "positives"}}``.  Raises
    :class:`NoCorrespondences` when no keypoint pair agrees with ``h``.
    """
    pixels = [im.pixels if isinstance(im, GrayImage) else np.asarray(im, np.float64)
              for im in (image_a, image_b)]
    pyrs = [Pyramid(p) for p in pixels]
    sides = []
    for p, pyr in zip(pixels, pyrs):
        kps = detect_keypoints(p, max_keypoints, pyramid=pyr)
        sides.append(_contexts(pyr, kps, lam))
    (kps_a, ctx_a), (kps_b, ctx_b) = sides
    corr = build_correspondences(kps_a, kps_b, h, dist_thresh=dist_thresh)
    if len(corr) == 0:
        raise NoCorrespondences("no ground-truth correspondences between the two images")
    truth = corr.as_dict()
    out = {}
    for method in methods:
        da = _describe(ctx_a, method_orientations(method, kps_a, ctx_a, net))
        db = _describe(ctx_b, method_orientations(method, kps_b, ctx_b, net))
        matches = nn_match(da, db, truth)
        curve = pr_curve(matches, len(corr))
        out[method] = dict(ap=average_precision(curve), matches=int(matches.correct.sum()),
                           positives=len(corr))
    return out


def evaluate_sequences(entries, net=None, methods=METHODS, **kwargs) -> EvalReport:
    """``entries``: iterable of (sequence, image_a, image_b, homography or None)."""
    report = EvalReport()
    for sequence, image_a, image_b, h in entries:
        if h is None:
            log.warning("skipping %s: no homography", sequence)
            continue
        try:
            result = evaluate_methods(image_a, image_b, h, net, methods, **kwargs)
        except NoCorrespondences:
            log.warning("skipping %s: no ground-truth correspondences", sequence)
            continue
        for method in methods:
            r = result[method]
            report.add(sequence, method, r["ap"], r["matches"], r["positives"])
    return report


def write_sequence_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sequence", "method", "ap", "matches", "positives"])
        for r in report.rows:
            w.writerow([r["sequence"], r["method"], f"{r['ap']:.6f}", r["matches"],
                        r["positives"]])


def write_summary_csv(path, report: EvalReport) -> None:
    maps = report.mean_ap() if report.rows else {}
    ranks = rank_methods(report) if report.rows else {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "mean_ap", "average_rank"])
        for m in report.methods:
            w.writerow([m, f"{maps[m]:.6f}", f"{ranks[m]:.4f}"])

