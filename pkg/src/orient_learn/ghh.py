"""Generalized Hinging Hyperplanes activation.

For each output unit the pre-activations are grouped into ``S`` groups of
``M`` values and combined as ``sum_s delta_s * max_m y[s, m]`` where
``delta_s`` is +1 for odd (1-based) ``s`` and -1 for even ``s``.  With S=1 this
is maxout; ReLU and PReLU are obtained by fixing some inputs to zero, see
:func:`as_relu` and :func:`as_prelu`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import ShapeError, UsageError


@dataclass(frozen=True)
class GhhConfig:
    S: int = 4
    M: int = 4

    def __post_init__(self):
        if self.S < 1 or self.M < 1:
            raise ValueError(f"GHH needs S >= 1 and M >= 1, got S={self.S}, M={self.M}")

    @property
    def group(self) -> int:
        return self.S * self.M

    def signs(self) -> np.ndarray:
        # s is 1-based in the formula: odd s -> +1, i.e. 0-based even index -> +1
        return np.where(np.arange(self.S) % 2 == 0, 1.0, -1.0)


@dataclass
class GhhState:
    argmax: np.ndarray  # (..., N, S), 0-based index into M
    input_shape: tuple


def _grouped(y: np.ndarray, config: GhhConfig, layout: str) -> np.ndarray:
    if layout not in ("auto", "flat", "grouped"):
        raise ValueError(f"unknown layout {layout!r}")
    trailing = y.ndim >= 2 and y.shape[-2:] == (config.S, config.M)
    if layout == "grouped" or (layout == "auto" and trailing):
        if not trailing:
            raise ShapeError(f"expected trailing dims ({config.S}, {config.M}), got {y.shape}")
        return y
    if y.shape[-1] % config.group:
        raise ShapeError(
            f"last axis of length {y.shape[-1]} is not a multiple of S*M={config.group}"
        )
    return y.reshape(*y.shape[:-1], y.shape[-1] // config.group, config.S, config.M)


def ghh_forward(y, config: GhhConfig, layout: str = "auto") -> tuple[np.ndarray, GhhState]:
    """Apply GHH to ``y``.

    With ``layout="grouped"`` ``y`` is shaped ``(..., S, M)``; with ``"flat"``
    its last axis has length ``N*S*M`` laid out unit-major, then s, then m, and
    the output gains a trailing axis of length N.  ``"auto"`` picks grouped
    whenever the trailing dims are exactly ``(S, M)``.  Returns ``(o, state)``.
    """
    y = np.asarray(y, dtype=np.float64)
    g = _grouped(y, config, layout)
    idx = g.argmax(axis=-1)
    maxima = np.take_along_axis(g, idx[..., None], axis=-1)[..., 0]
    out = maxima @ config.signs()
    return out, GhhState(argmax=idx, input_shape=y.shape)


def ghh_backward(grad_out, state: GhhState | None, config: GhhConfig) -> np.ndarray:
    if state is None:
        raise UsageError("ghh_backward called without a forward state")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != state.argmax.shape[:-1] or state.argmax.shape[-1] != config.S:
        raise UsageError(
            f"stale GHH state: grad shape {grad_out.shape}, state {state.argmax.shape}"
        )
    grouped = np.zeros(state.argmax.shape + (config.M,))
    per_group = grad_out[..., None] * config.signs()
    np.put_along_axis(grouped, state.argmax[..., None], per_group[..., None], axis=-1)
    return grouped.reshape(state.input_shape)


class Reduction(NamedTuple):
    """A GHH configuration plus the rule that builds its inputs from ``x``."""

    config: GhhConfig
    wire: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x) -> np.ndarray:
        return ghh_forward(self.wire(np.asarray(x, dtype=np.float64)), self.config)[0]


def as_relu() -> Reduction:
    def wire(x):
        y = np.zeros(x.shape + (1, 2))
        y[..., 0, 1] = x
        return y

    return Reduction(GhhConfig(1, 2), wire)


def as_maxout(M: int) -> Reduction:
    """Maxout over the trailing axis of length ``M``."""
    if M < 2:
        raise ValueError("maxout needs M >= 2")

    def wire(x):
        if x.shape[-1] != M:
            raise ShapeError(f"maxout({M}) expects trailing axis {M}, got {x.shape[-1]}")
        return x[..., None, :]

    return Reduction(GhhConfig(1, M), wire)


def as_prelu(alpha: float) -> Reduction:
    """PReLU with slope ``alpha >= 0`` on the negative side.

    Uses S=2, M=2 with the first entry of each group pinned to zero:
    ``max(0, x) - max(0, -alpha * x)``.
    """
    if alpha < 0:
        raise ValueError("the two-hinge PReLU wiring needs alpha >= 0")

    def wire(x):
        y = np.zeros(x.shape + (2, 2))
        y[..., 0, 1] = x
        y[..., 1, 1] = -alpha * x
        return y

    return Reduction(GhhConfig(2, 2), wire)
