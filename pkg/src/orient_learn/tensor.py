"""Dense layer primitives with hand-derived backward passes, ADAM, and checkpoints.

Arrays are plain ``numpy.float64`` ndarrays in NCHW layout.  Every forward
function has a matching ``*_backward`` that takes the upstream gradient plus
whatever the forward pass returned or cached.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

from .errors import IngestionError, ShapeError, TrainingError

DTYPE = np.float64


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _check_conv(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> None:
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got rank {x.ndim}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be (out, in, kh, kw), got rank {kernel.ndim}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input C={x.shape[1]}, kernel in={kernel.shape[1]}"
        )
    if kernel.shape[2] > x.shape[2] or kernel.shape[3] > x.shape[3]:
        raise ShapeError(
            f"conv2d kernel {kernel.shape[2]}x{kernel.shape[3]} larger than "
            f"input {x.shape[2]}x{x.shape[3]}"
        )
    if bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({kernel.shape[0]},)")


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Columns shaped (C*kh*kw, N*Ho*Wo) for a valid correlation."""
    n, c, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=DTYPE)
    xt = x.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + ho, j : j + wo]
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x, kernel, bias) -> np.ndarray:
    """Valid cross-correlation of ``x`` (N, C, H, W) with ``kernel`` (F, C, kh, kw)."""
    x, kernel, bias = _as_array(x), _as_array(kernel), _as_array(bias)
    _check_conv(x, kernel, bias)
    f, _, kh, kw = kernel.shape
    n, _, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    out = kernel.reshape(f, -1) @ _im2col(x, kh, kw)  # F, N*Ho*Wo
    out = out.reshape(f, n, ho, wo).transpose(1, 0, 2, 3)
    return out + bias[None, :, None, None]


def conv2d_backward(grad_out, x, kernel, need_input_grad=True):
    """Return ``(grad_x, grad_kernel, grad_bias)``; ``grad_x`` is None when not needed."""
    grad_out = _as_array(grad_out)
    f, c, kh, kw = kernel.shape
    n, _, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    g2 = grad_out.transpose(1, 0, 2, 3).reshape(f, -1)  # F, N*Ho*Wo
    grad_kernel = (g2 @ _im2col(x, kh, kw).T).reshape(kernel.shape)
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_x = None
    if need_input_grad:
        dcols = (kernel.reshape(f, -1).T @ g2).reshape(c, kh, kw, n, ho, wo)
        gxt = np.zeros((c, n, h, w), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                gxt[:, :, i : i + ho, j : j + wo] += dcols[:, i, j]
        grad_x = gxt.transpose(1, 0, 2, 3)
    return grad_x, grad_kernel, grad_bias


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def maxpool2x2(x):
    """2x2 max pooling with stride 2.

    Returns the pooled array and the window-local argmax (0..3, row-major),
    first occurrence on ties.
    """
    x = _as_array(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2x2 input must be NCHW, got rank {x.ndim}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    index = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, index[..., None], axis=-1)[..., 0]
    return out, index


def maxpool2x2_backward(grad_out, index):
    grad_out = _as_array(grad_out)
    n, c, ho, wo = grad_out.shape
    blocks = np.zeros((n, c, ho, wo, 4), dtype=DTYPE)
    np.put_along_axis(blocks, index[..., None], grad_out[..., None], axis=-1)
    blocks = blocks.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return blocks.reshape(n, c, ho * 2, wo * 2)


# ---------------------------------------------------------------------------
# dense layers and elementwise activations
# ---------------------------------------------------------------------------


def fully_connected(x, weights, bias) -> np.ndarray:
    """Affine map ``x @ weights.T + bias``; ``x`` is flattened to (N, in)."""
    x, weights, bias = _as_array(x), _as_array(weights), _as_array(bias)
    flat = x.reshape(x.shape[0], -1)
    if weights.ndim != 2 or flat.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"fully_connected input length {flat.shape[1]} does not match "
            f"weights {weights.shape}"
        )
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"fully_connected bias shape {bias.shape} != ({weights.shape[0]},)")
    return flat @ weights.T + bias


def fully_connected_backward(grad_out, x, weights):
    grad_out = _as_array(grad_out)
    flat = x.reshape(x.shape[0], -1)
    grad_w = grad_out.T @ flat
    grad_b = grad_out.sum(axis=0)
    grad_x = (grad_out @ weights).reshape(x.shape)
    return grad_x, grad_w, grad_b


def relu(x) -> np.ndarray:
    return np.maximum(_as_array(x), 0.0)


def relu_backward(grad_out, x):
    # zero subgradient at exactly 0
    return np.where(x > 0, grad_out, 0.0)


def tanh(x) -> np.ndarray:
    return np.tanh(_as_array(x))


def tanh_backward(grad_out, out):
    return grad_out * (1.0 - out * out)


def prelu(x, alpha) -> np.ndarray:
    """Per-unit PReLU over the last axis: ``max(0,x) - alpha * max(0,-x)``."""
    x = _as_array(x)
    return np.where(x > 0, x, alpha * x)


def prelu_backward(grad_out, x, alpha):
    grad_x = np.where(x > 0, grad_out, alpha * grad_out)
    grad_alpha = np.where(x > 0, 0.0, grad_out * x).reshape(-1, x.shape[-1]).sum(axis=0)
    return grad_x, grad_alpha


def dropout(x, rate: float, train: bool, rng: np.random.Generator | None = None):
    """Inverted dropout.  Returns ``(out, mask)``; mask is None in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = _as_array(x)
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------


class ParamSet(Mapping):
    """Ordered, name-unique collection of parameter arrays with fixed shapes."""

    def __init__(self, items=()):
        self._data: dict[str, np.ndarray] = {}
        for name, value in dict(items).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self._data:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._data[name] = np.array(value, dtype=DTYPE)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self._data:
            raise KeyError(f"unknown parameter {name!r}; use add()")
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != self._data[name].shape:
            raise ShapeError(
                f"parameter {name!r} has shape {self._data[name].shape}, got {value.shape}"
            )
        self._data[name][...] = value

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def copy(self) -> "ParamSet":
        return ParamSet((k, v.copy()) for k, v in self._data.items())

    def zeros_like(self) -> "ParamSet":
        return ParamSet((k, np.zeros_like(v)) for k, v in self._data.items())

    def size(self) -> int:
        return sum(v.size for v in self._data.values())

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._data.items())
        return f"ParamSet({shapes})"


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")

    @classmethod
    def for_params(cls, params: ParamSet, **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.m = {k: np.zeros_like(v) for k, v in params.items()}
        state.v = {k: np.zeros_like(v) for k, v in params.items()}
        return state


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], state: AdamState) -> ParamSet:
    """Apply one bias-corrected ADAM update in place and return ``params``.

    The learning-rate schedule is the caller's job (set ``state.lr``).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name in params:
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        params[name] = params[name] - update
    return params


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def relative_error(analytic, numeric, floor: float = 1e-7) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    analytic = np.asarray(analytic, dtype=DTYPE)
    numeric = np.asarray(numeric, dtype=DTYPE)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(
    f: Callable[[ParamSet], float],
    params: ParamSet,
    grads: Mapping[str, np.ndarray],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-7,
) -> float:
    """Worst relative error between ``grads`` and central differences of ``f``.

    ``max_entries`` limits how many entries of each parameter are probed
    (chosen with ``rng``); by default every entry is checked.  ``params`` is
    restored on return.
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for name in params:
        arr = params[name]
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        analytic = np.asarray(grads[name], dtype=DTYPE).reshape(-1)[idx]
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(params)
            flat[i] = orig - h
            fm = f(params)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise ValueError(f"objective not finite while probing {name}[{i}]")
            numeric[j] = (fp - fm) / (2.0 * h)
        if idx.size:
            worst = max(worst, float(relative_error(analytic, numeric, floor).max()))
    return worst


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"OLCK"
CHECKPOINT_VERSION = 1


def encode_checkpoint(params: ParamSet, meta: bytes = b"") -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta)), meta]
    out.append(struct.pack("<I", len(params)))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, record=None) -> bytes:
        if self.pos + n > len(self.buf):
            raise IngestionError("unexpected end of file", offset=self.pos, record=record)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, record=None):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), record))


def decode_checkpoint(buf: bytes) -> tuple[ParamSet, bytes]:
    r = _Reader(buf)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise IngestionError("not a checkpoint file (bad magic)", offset=0)
    version, meta_len = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise IngestionError(f"unsupported checkpoint version {version}", offset=4)
    meta = r.take(meta_len)
    (count,) = r.unpack("<I")
    params = ParamSet()
    for i in range(count):
        (name_len,) = r.unpack("<I", record=i)
        name = r.take(name_len, record=i).decode("utf-8")
        (rank,) = r.unpack("<I", record=i)
        dims = r.unpack(f"<{rank}I", record=i)
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(8 * n, record=i), dtype="<f8").astype(DTYPE)
        params.add(name, data.reshape(dims))
    if r.pos != len(buf):
        raise IngestionError("trailing bytes after last parameter", offset=r.pos)
    return params, meta


def save_checkpoint(path, params: ParamSet, meta: bytes = b"") -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(params, meta))


def load_checkpoint(path) -> tuple[ParamSet, bytes]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
