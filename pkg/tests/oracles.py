"""Slow, obviously-correct reference implementations used only by the tests."""

import math

import numpy as np


def conv2d_loops(x, k, b):
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    out = np.zeros((n, o, h - kh + 1, w - kw + 1))
    for a in range(n):
        for f in range(o):
            for i in range(h - kh + 1):
                for j in range(w - kw + 1):
                    s = b[f]
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                s += x[a, ch, i + u, j + v] * k[f, ch, u, v]
                    out[a, f, i, j] = s
    return out


def maxpool_loops(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for a in range(n):
        for ch in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[a, ch, i, j] = max(x[a, ch, 2 * i + di, 2 * j + dj]
                                           for di in (0, 1) for dj in (0, 1))
    return out


def fc_loops(x, w, b):
    out = np.zeros((x.shape[0], w.shape[0]))
    for a in range(x.shape[0]):
        for o in range(w.shape[0]):
            out[a, o] = b[o] + sum(x[a, i] * w[o, i] for i in range(w.shape[1]))
    return out


def nn_brute(a, b):
    """Nearest row of b for each row of a by exhaustive search (lowest index on ties)."""
    idx, dist = [], []
    for row in a:
        best, best_d = 0, math.inf
        for j, other in enumerate(b):
            d = math.sqrt(sum((p - q) ** 2 for p, q in zip(row, other)))
            if d < best_d:
                best, best_d = j, d
        idx.append(best)
        dist.append(best_d)
    return np.array(idx), np.array(dist)
