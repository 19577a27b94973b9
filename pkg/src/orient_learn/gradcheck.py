"""Finite-difference verification of every hand-written backward pass.

Layers are reached through their modules at call time (``T.conv2d_backward``
rather than a bound import) so a patched implementation is what gets checked.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import descriptor
from . import ghh as G
from . import network as N
from . import tensor as T
from . import trainer
from .data.dataset import TrainingPair
from .data.patches import patch_from_context

LAYER_TOLERANCE = 1e-4
COMPOSITE_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    component: str
    max_rel_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return math.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _projection(rng, shape):
    return rng.standard_normal(shape)


def check_conv(rng) -> float:
    x = rng.standard_normal((2, 3, 7, 7))
    ps = T.ParamSet({"x": x, "k": rng.standard_normal((4, 3, 3, 3)), "b": rng.standard_normal(4)})
    proj = _projection(rng, (2, 4, 5, 5))

    def f(p):
        return float(np.sum(proj * T.conv2d(p["x"], p["k"], p["b"])))

    gx, gk, gb = T.conv2d_backward(proj, ps["x"], ps["k"])
    return T.finite_difference_check(f, ps, {"x": gx, "k": gk, "b": gb})


def check_pool(rng) -> float:
    # distinct values spaced well beyond the probe step, so no window ties
    vals = rng.permutation(2 * 3 * 8 * 8).astype(np.float64) * 0.01
    ps = T.ParamSet({"x": vals.reshape(2, 3, 8, 8)})
    proj = _projection(rng, (2, 3, 4, 4))
    _, index = T.maxpool2x2(ps["x"])

    def f(p):
        return float(np.sum(proj * T.maxpool2x2(p["x"])[0]))

    return T.finite_difference_check(f, ps, {"x": T.maxpool2x2_backward(proj, index)})


def check_fc(rng) -> float:
    ps = T.ParamSet({"x": rng.standard_normal((5, 12)), "w": rng.standard_normal((7, 12)),
                     "b": rng.standard_normal(7)})
    proj = _projection(rng, (5, 7))

    def f(p):
        return float(np.sum(proj * T.fully_connected(p["x"], p["w"], p["b"])))

    gx, gw, gb = T.fully_connected_backward(proj, ps["x"], ps["w"])
    return T.finite_difference_check(f, ps, {"x": gx, "w": gw, "b": gb})


def check_relu(rng) -> float:
    ps = T.ParamSet({"x": _away_from_zero(rng, (4, 30))})
    proj = _projection(rng, (4, 30))

    def f(p):
        return float(np.sum(proj * T.relu(p["x"])))

    return T.finite_difference_check(f, ps, {"x": T.relu_backward(proj, ps["x"])})


def check_ghh(rng) -> float:
    cfg = G.GhhConfig(4, 4)
    # a per-row permutation keeps every max well separated
    y = np.stack([rng.permutation(6 * cfg.group) for _ in range(3)]).astype(np.float64) * 0.01
    ps = T.ParamSet({"y": y})
    out, state = G.ghh_forward(y, cfg, layout="flat")
    proj = _projection(rng, out.shape)

    def f(p):
        return float(np.sum(proj * G.ghh_forward(p["y"], cfg, layout="flat")[0]))

    return T.finite_difference_check(f, ps, {"y": G.ghh_backward(proj, state, cfg)})


def check_atan2(rng, points: int = 100, h: float = 1e-6) -> float:
    r = rng.uniform(0.1, 10.0, points)
    phi = rng.uniform(-math.pi, math.pi, points)
    y, x = r * np.sin(phi), r * np.cos(phi)
    dy, dx = N.arctan2_grad(y, x)

    def numeric(fy, fx):
        # the four-quadrant branch cut is a jump of 2*pi, not a gradient
        return N.wrap_angle(np.arctan2(fy(+h), fx(+h)) - np.arctan2(fy(-h), fx(-h))) / (2 * h)

    ny = numeric(lambda s: y + s, lambda s: x)
    nx = numeric(lambda s: y, lambda s: x + s)
    return float(max(T.relative_error(dy, ny).max(), T.relative_error(dx, nx).max()))


def _same(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def tie_free_check(f, params, grads, entries: int, rng, h: float = 1e-6,
                   max_tries: int = 8) -> float:
    """Central differences over ``entries`` random entries of each parameter.

    ``f(params)`` returns ``(value, pattern)`` where ``pattern`` lists the
    discrete branch choices made while evaluating.  A probe whose +h or -h
    evaluation changes the pattern straddles a tie (a kink of the
    piecewise-defined objective), where no derivative exists; it is
    replaced by another entry.
    """
    worst = 0.0
    _, base = f(params)
    for name in params:
        flat = params[name].reshape(-1)
        analytic = np.asarray(grads[name]).reshape(-1)
        order = rng.permutation(flat.size)[: entries * max_tries]
        accepted = 0
        for i in order:
            if accepted == entries:
                break
            orig = flat[i]
            flat[i] = orig + h
            fp, pp = f(params)
            flat[i] = orig - h
            fm, pm = f(params)
            flat[i] = orig
            if not (_same(pp, base) and _same(pm, base)):
                continue
            numeric = (fp - fm) / (2.0 * h)
            worst = max(worst, float(T.relative_error(analytic[i], numeric)))
            accepted += 1
    return worst


def _regularizer_inactive(net, factor: float = 1e-6) -> bool:
    # away from the origin the eps in the atan2 gradient is a guard, not a change
    heads = net._cache["heads"]
    return bool(np.all(net.atan2_eps < factor * np.sum(heads * heads, axis=1)))


def check_network(rng, activations=N.ACTIVATIONS, entries: int = 6) -> float:
    worst = 0.0
    for act in activations:
        spec = N.ArchitectureSpec.for_activation(act)
        for _ in range(50):
            net = N.OrientationNet(spec, seed=int(rng.integers(1 << 30))).eval()
            patches = rng.standard_normal((3, 1, spec.input_side, spec.input_side))
            net.forward(patches)
            if _regularizer_inactive(net):
                break
        else:
            raise RuntimeError(f"no well-conditioned {act} network found")
        proj = _projection(rng, 3)
        grads = net.backward_through_angle(proj)

        def f(p, net=net, patches=patches, proj=proj):
            theta, _ = N.heads_to_angle(net.forward(patches))
            return float(np.sum(proj * theta)), net.branch_pattern()

        worst = max(worst, tie_free_check(f, net.params, grads, entries, rng))
    return worst


def smooth_image(rng, side: int = 160, blur: float = 3.0) -> np.ndarray:
    img = ndimage.gaussian_filter(rng.standard_normal((side, side)), blur)
    img -= img.min()
    return img / img.max()


def _grid_margin(theta) -> float:
    pos = np.mod(theta, descriptor.ANGLE_STEP)
    return float(np.min(np.minimum(pos, descriptor.ANGLE_STEP - pos)))


def random_pairs(rng, n: int, side: int = 160) -> list[TrainingPair]:
    """Unrelated random keypoints on two smooth random images (table and patch plumbing only)."""
    imgs = [smooth_image(rng, side), smooth_image(rng, side)]
    pairs = []
    for i in range(n):
        ctx = []
        for img in imgs:
            sigma = rng.uniform(1.5, 2.5)
            reach = descriptor.PatchContext(img, 0, 0, sigma).sample_radius + 1
            x, y = rng.uniform(reach, side - reach, 2)
            ctx.append(descriptor.PatchContext(img, x, y, sigma, keypoint_id=i))
        pairs.append(TrainingPair(patch_from_context(ctx[0]), patch_from_context(ctx[1]),
                                  descriptor.build_table(ctx[0]), descriptor.build_table(ctx[1]),
                                  ctx1=ctx[0], ctx2=ctx[1]))
    return pairs


def check_pair_loss(rng, points: int = 20, entries: int = 4, margin: float = 2e-3) -> float:
    """Composite loss through lookup interpolation, at points away from grid angles."""
    worst, done, tries = 0.0, 0, 0
    net = N.OrientationNet(seed=int(rng.integers(1 << 30))).eval()
    while done < points:
        tries += 1
        if tries > 20 * points:
            raise RuntimeError("could not find enough non-tie points")
        pair = random_pairs(rng, 1)[0]
        patches = np.stack([pair.patch1, pair.patch2])[:, None]
        theta, _ = net.predict_orientation(patches)
        if _grid_margin(theta) < margin or not _regularizer_inactive(net):
            continue
        grads = trainer.pair_gradient(net, pair)

        def f(p, pair=pair, patches=patches):
            loss = trainer.pair_loss(net, pair)
            theta, _ = N.heads_to_angle(net._cache["heads"])
            cell = np.floor(np.mod(theta, 2 * math.pi) / descriptor.ANGLE_STEP)
            return loss, net.branch_pattern() + [cell]

        worst = max(worst, tie_free_check(f, net.params, grads, entries, rng))
        done += 1
    return worst


CHECKS = (
    ("conv", check_conv, LAYER_TOLERANCE),
    ("pool", check_pool, LAYER_TOLERANCE),
    ("fc", check_fc, LAYER_TOLERANCE),
    ("relu", check_relu, LAYER_TOLERANCE),
    ("ghh", check_ghh, LAYER_TOLERANCE),
    ("atan2_head", check_atan2, LAYER_TOLERANCE),
    ("network", check_network, LAYER_TOLERANCE),
    ("pair_loss", check_pair_loss, COMPOSITE_TOLERANCE),
)


def run_gradcheck(seed: int = 0, components=None) -> list[CheckResult]:
    """Run the checks in a fixed order; each gets its own seeded stream."""
    results = []
    for i, (name, fn, tol) in enumerate(CHECKS):
        if components is not None and name not in components:
            continue
        start = time.perf_counter()
        err = fn(np.random.default_rng([seed, 100 + i]))
        results.append(CheckResult(name, err, tol, time.perf_counter() - start))
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'component':<12} {'max_rel_error':>14} {'tolerance':>10}  status"]
    for r in results:
        lines.append(f"{r.component:<12} {r.max_rel_error:>14.3e} {r.tolerance:>10.0e}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
