"""Orientation CNN: three conv/ReLU/pool stages and two fully connected layers.

The network emits two values per patch which are mapped to an angle with
``atan2(first, second)``.  Angles are radians, counter-clockwise in the
(x right, y down) pixel frame used by the samplers.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import IngestionError, ShapeError, UsageError
from .ghh import GhhConfig, ghh_backward, ghh_forward

ACTIVATIONS = ("ghh", "maxout", "relu", "tanh", "prelu")

# hidden widths chosen so every variant has 1600 pre-activations in fc1
DEFAULT_FC1_UNITS = {"ghh": 100, "maxout": 400, "relu": 1600, "tanh": 1600, "prelu": 1600}

ATAN2_EPS = 1e-8


@dataclass(frozen=True)
class ArchitectureSpec:
    input_side: int = 28
    conv: tuple = ((5, 10), (5, 20), (3, 50))
    fc1_units: int = 100
    activation: str = "ghh"
    ghh: GhhConfig = field(default_factory=GhhConfig)
    dropout: float = 0.3

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {ACTIVATIONS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        self.flat_size()  # validates the spatial chain

    @classmethod
    def for_activation(cls, activation: str, **kwargs) -> "ArchitectureSpec":
        if activation == "maxout" and "ghh" not in kwargs:
            kwargs["ghh"] = GhhConfig(1, 4)
        kwargs.setdefault("fc1_units", DEFAULT_FC1_UNITS[activation])
        return cls(activation=activation, **kwargs)

    def spatial_chain(self) -> list[int]:
        sides = [self.input_side]
        side = self.input_side
        for k, _ in self.conv:
            side = side - k + 1
            if side <= 0:
                raise ValueError(f"conv kernel {k} does not fit spatial size {sides[-1]}")
            sides.append(side)
            if side % 2:
                raise ValueError(f"spatial size {side} before pooling is odd")
            side //= 2
            sides.append(side)
        return sides

    def flat_size(self) -> int:
        return self.spatial_chain()[-1] ** 2 * self.conv[-1][1]

    @property
    def grouped(self) -> bool:
        """True when the fc layers use GHH/maxout (grouped pre-activations)."""
        return self.activation in ("ghh", "maxout")

    def fc_shapes(self) -> tuple[tuple[int, int], tuple[int, int]]:
        flat = self.flat_size()
        if self.grouped:
            g = self.ghh.group
            return (self.fc1_units * g, flat), (2 * g, self.fc1_units)
        return (self.fc1_units, flat), (2, self.fc1_units)

    def compatible(self, other: "ArchitectureSpec") -> bool:
        """Same activation and parameter shapes (dropout rate does not matter at inference)."""
        return (self.activation == other.activation and self.input_side == other.input_side
                and tuple(self.conv) == tuple(other.conv) and self.fc_shapes() == other.fc_shapes()
                and (not self.grouped or self.ghh == other.ghh))

    # -- header serialization -------------------------------------------------

    def encode(self) -> bytes:
        name = self.activation.encode("ascii")
        parts = [struct.pack("<I", len(name)), name]
        parts.append(struct.pack("<III", self.ghh.S, self.ghh.M, self.fc1_units))
        parts.append(struct.pack("<d", self.dropout))
        parts.append(struct.pack("<II", self.input_side, len(self.conv)))
        for k, c in self.conv:
            parts.append(struct.pack("<II", k, c))
        return b"".join(parts)

    @classmethod
    def decode(cls, buf: bytes) -> "ArchitectureSpec":
        try:
            pos = 0
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            activation = buf[pos : pos + n].decode("ascii")
            pos += n
            S, M, fc1 = struct.unpack_from("<III", buf, pos)
            pos += 12
            (dropout,) = struct.unpack_from("<d", buf, pos)
            pos += 8
            side, nconv = struct.unpack_from("<II", buf, pos)
            pos += 8
            conv = []
            for _ in range(nconv):
                conv.append(struct.unpack_from("<II", buf, pos))
                pos += 8
        except struct.error as exc:
            raise IngestionError(f"truncated architecture header: {exc}") from None
        return cls(
            input_side=side,
            conv=tuple(tuple(c) for c in conv),
            fc1_units=fc1,
            activation=activation,
            ghh=GhhConfig(S, M),
            dropout=dropout,
        )


def arctan2_grad(y, x, eps: float = ATAN2_EPS):
    """Regularized gradient of ``atan2(y, x)``, returned as ``(d/dy, d/dx)``.

    Equal to ``(x, -y) / (x^2 + y^2 + eps)``; finite at the origin where it is 0.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    denom = np.asarray(x) ** 2 + np.asarray(y) ** 2 + eps
    return x / denom, -y / denom


def wrap_angle(theta):
    """Map angles into (-pi, pi]."""
    theta = np.asarray(theta, dtype=np.float64)
    wrapped = np.mod(theta + math.pi, 2 * math.pi) - math.pi
    return np.where(wrapped <= -math.pi, wrapped + 2 * math.pi, wrapped)


def heads_to_angle(heads):
    """``atan2(v1, v2)`` in (-pi, pi] plus a mask of degenerate (0, 0) outputs."""
    heads = np.asarray(heads, dtype=np.float64)
    v1, v2 = heads[..., 0], heads[..., 1]
    theta = np.arctan2(v1, v2)
    theta = np.where(theta <= -math.pi, theta + 2 * math.pi, theta)
    degenerate = (v1 == 0) & (v2 == 0)
    return np.where(degenerate, 0.0, theta), degenerate


class OrientationNet:
    """The orientation regressor with hand-written forward/backward passes."""

    def __init__(self, spec: ArchitectureSpec | None = None, params: T.ParamSet | None = None,
                 seed: int = 0, atan2_eps: float = ATAN2_EPS):
        self.spec = spec or ArchitectureSpec()
        self.atan2_eps = atan2_eps
        self.train_mode = False
        self.dropout_rng = np.random.default_rng([seed, 1])
        if params is None:
            params = self.init_params(np.random.default_rng([seed, 0]))
        self._check_params(params)
        self.params = params
        self._cache = None

    # -- parameters -----------------------------------------------------------

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        cin = 1
        for i, (k, c) in enumerate(self.spec.conv, 1):
            shapes[f"conv{i}.w"] = (c, cin, k, k)
            shapes[f"conv{i}.b"] = (c,)
            cin = c
        (o1, i1), (o2, i2) = self.spec.fc_shapes()
        shapes["fc1.w"] = (o1, i1)
        shapes["fc1.b"] = (o1,)
        if self.spec.activation == "prelu":
            shapes["fc1.alpha"] = (o1,)
        shapes["fc2.w"] = (o2, i2)
        shapes["fc2.b"] = (o2,)
        return shapes

    def init_params(self, rng: np.random.Generator) -> T.ParamSet:
        params = T.ParamSet()
        for name, shape in self.param_shapes().items():
            if name.endswith(".b"):
                params.add(name, np.zeros(shape))
            elif name.endswith(".alpha"):
                params.add(name, np.full(shape, 0.25))
            elif len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
                fan_out = shape[0] * shape[2] * shape[3]
                params.add(name, T.glorot_uniform(rng, shape, fan_in, fan_out))
            else:
                params.add(name, T.glorot_uniform(rng, shape, shape[1], shape[0]))
        return params

    def _check_params(self, params: T.ParamSet) -> None:
        expected = self.param_shapes()
        if list(params) != list(expected):
            raise ShapeError(f"parameter names {list(params)} do not match {list(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {params[name].shape}")

    def train(self) -> "OrientationNet":
        self.train_mode = True
        return self

    def eval(self) -> "OrientationNet":
        self.train_mode = False
        return self

    # -- forward / backward ---------------------------------------------------

    def _as_batch(self, patches) -> np.ndarray:
        x = np.asarray(patches, dtype=np.float64)
        side = self.spec.input_side
        if x.shape == (side, side):
            x = x[None, None]
        elif x.ndim == 3 and x.shape[1:] == (side, side):
            x = x[:, None]
        if x.ndim != 4 or x.shape[1:] != (1, side, side):
            raise ShapeError(f"expected patches of shape (N, 1, {side}, {side}), got {x.shape}")
        return x

    def _activate(self, z, p, layer):
        spec = self.spec
        if spec.grouped:
            out, state = ghh_forward(z, spec.ghh, layout="flat")
            return out, state
        if spec.activation == "relu":
            return T.relu(z), z
        if spec.activation == "tanh":
            out = T.tanh(z)
            return out, out
        return T.prelu(z, p[f"{layer}.alpha"]), z

    def _activate_backward(self, grad, cache, p, layer, grads):
        spec = self.spec
        if spec.grouped:
            return ghh_backward(grad, cache, spec.ghh)
        if spec.activation == "relu":
            return T.relu_backward(grad, cache)
        if spec.activation == "tanh":
            return T.tanh_backward(grad, cache)
        gz, galpha = T.prelu_backward(grad, cache, p[f"{layer}.alpha"])
        grads[f"{layer}.alpha"] = galpha
        return gz

    def forward(self, patches) -> np.ndarray:
        """Head values ``(N, 2)`` for a batch of patches; caches for backward."""
        p = self.params
        x = self._as_batch(patches)
        stages = []
        h = x
        for i in range(1, len(self.spec.conv) + 1):
            z = T.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"])
            a = T.relu(z)
            pooled, index = T.maxpool2x2(a)
            stages.append((h, z, index))
            h = pooled
        flat = h.reshape(h.shape[0], -1)
        z1 = T.fully_connected(flat, p["fc1.w"], p["fc1.b"])
        a1, c1 = self._activate(z1, p, "fc1")
        d1, mask = T.dropout(a1, self.spec.dropout, self.train_mode, self.dropout_rng)
        z2 = T.fully_connected(d1, p["fc2.w"], p["fc2.b"])
        if self.spec.grouped:
            heads, c2 = ghh_forward(z2, self.spec.ghh, layout="flat")
        else:
            heads, c2 = z2, None
        self._cache = dict(stages=stages, pooled_shape=h.shape, flat=flat, c1=c1,
                           mask=mask, d1=d1, c2=c2, heads=heads)
        return heads

    def backward(self, grad_heads) -> dict[str, np.ndarray]:
        """Parameter gradients given ``dL/dheads`` (N, 2) for the cached forward."""
        if self._cache is None:
            raise UsageError("backward called before forward")
        cache = self._cache
        p = self.params
        grads: dict[str, np.ndarray] = {}
        g = np.asarray(grad_heads, dtype=np.float64)
        if g.shape != cache["heads"].shape:
            raise ShapeError(f"head gradient shape {g.shape} != {cache['heads'].shape}")
        if self.spec.grouped:
            g = ghh_backward(g, cache["c2"], self.spec.ghh)
        g, grads["fc2.w"], grads["fc2.b"] = T.fully_connected_backward(g, cache["d1"], p["fc2.w"])
        g = T.dropout_backward(g, cache["mask"])
        g = self._activate_backward(g, cache["c1"], p, "fc1", grads)
        g, grads["fc1.w"], grads["fc1.b"] = T.fully_connected_backward(g, cache["flat"], p["fc1.w"])
        g = g.reshape(cache["pooled_shape"])
        for i in range(len(self.spec.conv), 0, -1):
            h, z, index = cache["stages"][i - 1]
            g = T.maxpool2x2_backward(g, index)
            g = T.relu_backward(g, z)
            g, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = T.conv2d_backward(
                g, h, p[f"conv{i}.w"], need_input_grad=i > 1
            )
        return {name: grads[name] for name in p}

    def branch_pattern(self) -> list[np.ndarray]:
        """Discrete choices of the cached forward: ReLU signs, pool winners, GHH argmaxes.

        Two forwards with equal patterns lie on the same linear piece of the
        network's non-smooth parts.
        """
        if self._cache is None:
            raise UsageError("branch_pattern called before forward")
        cache = self._cache
        out = []
        for _, z, index in cache["stages"]:
            out += [z > 0, index]
        c1 = cache["c1"]
        if self.spec.grouped:
            out.append(c1.argmax)
        elif self.spec.activation in ("relu", "prelu"):
            out.append(c1 > 0)
        if cache["c2"] is not None:
            out.append(cache["c2"].argmax)
        return out

    def predict_orientation(self, patches):
        """Angles in (-pi, pi] and the degenerate-output mask."""
        return heads_to_angle(self.forward(patches))

    def backward_through_angle(self, grad_theta) -> dict[str, np.ndarray]:
        """Gradients of ``sum(grad_theta * theta)`` using the regularized atan2 gradient."""
        if self._cache is None:
            raise UsageError("backward_through_angle called before forward")
        heads = self._cache["heads"]
        grad_theta = np.broadcast_to(np.asarray(grad_theta, dtype=np.float64), heads.shape[:1])
        d_dy, d_dx = arctan2_grad(heads[:, 0], heads[:, 1], self.atan2_eps)
        grad_heads = np.stack([grad_theta * d_dy, grad_theta * d_dx], axis=1)
        return self.backward(grad_heads)

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        T.save_checkpoint(path, self.params, self.spec.encode())

    def to_bytes(self) -> bytes:
        return T.encode_checkpoint(self.params, self.spec.encode())

    @classmethod
    def load(cls, path, **kwargs) -> "OrientationNet":
        params, meta = T.load_checkpoint(path)
        return cls(ArchitectureSpec.decode(meta), params, **kwargs)

    def copy(self) -> "OrientationNet":
        twin = OrientationNet(self.spec, self.params.copy(), atan2_eps=self.atan2_eps)
        twin.train_mode = self.train_mode
        return twin
