"""Siamese descriptor-distance objective and the training loop.

For a pair the loss is ``|| g1(theta1) - g2(theta2) ||^2`` where ``g*`` is the
interpolated descriptor-table lookup and ``theta* = atan2`` of the network
heads.  Its gradient chains ``dL/dg``, the table derivative ``dg/dtheta`` and
the network's ``dtheta/dW`` for each branch and sums the two.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import descriptor
from . import tensor as T
from .data.dataset import TrainingPair
from .errors import TrainingError
from .network import (ACTIVATIONS, ATAN2_EPS, ArchitectureSpec, OrientationNet, heads_to_angle,
                      wrap_angle)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 10
    learning_rate: float = 1e-3
    halve_every: int = 10
    seed: int = 0
    atan2_eps: float = ATAN2_EPS
    # "exact": derivative of the interpolated lookup (the optimized objective);
    # "central": the one-interval central difference of the table.
    table_derivative: str = "exact"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.table_derivative not in ("exact", "central"):
            raise ValueError(f"unknown table_derivative {self.table_derivative!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch index."""
        if self.halve_every <= 0:
            return self.learning_rate
        return self.learning_rate * 0.5 ** (epoch // self.halve_every)


@dataclass
class LossReport:
    epochs: list = field(default_factory=list)

    def add(self, epoch: int, mean_loss: float, lr: float, heldout_error: float) -> None:
        self.epochs.append(dict(epoch=epoch, mean_loss=mean_loss, lr=lr,
                                heldout_error_deg=heldout_error))

    @property
    def losses(self) -> list[float]:
        return [e["mean_loss"] for e in self.epochs]


def _stack(pairs: list[TrainingPair]):
    patches = np.concatenate([np.stack([p.patch1 for p in pairs]),
                              np.stack([p.patch2 for p in pairs])])[:, None]
    tables = np.concatenate([np.stack([p.table1.values for p in pairs]),
                             np.stack([p.table2.values for p in pairs])])
    return patches, tables


def angle_gradients(g1, g2, dg1, dg2):
    """dL/dtheta for both branches of ``L = ||g1 - g2||^2`` given dg/dtheta.

    Rows are pairs.  Returns ``(loss, dL/dtheta1, dL/dtheta2)``.
    """
    diff = np.asarray(g1, np.float64) - np.asarray(g2, np.float64)
    loss = np.sum(diff * diff, axis=-1)
    return loss, np.sum(2.0 * diff * dg1, axis=-1), np.sum(-2.0 * diff * dg2, axis=-1)


def batch_objective(net: OrientationNet, pairs: list[TrainingPair], with_grad: bool = True,
                    table_derivative: str = "exact"):
    """Summed pair loss over ``pairs`` and, optionally, its parameter gradient.

    Both branches of every pair go through the network as one batch; per-pair
    contributions are accumulated in pair order.
    """
    n = len(pairs)
    patches, tables = _stack(pairs)
    heads = net.forward(patches)
    theta, _ = heads_to_angle(heads)
    halves = (("first", slice(0, n)), ("second", slice(n, 2 * n)))
    for branch, sl in halves:
        if not np.all(np.isfinite(theta[sl])):
            raise TrainingError(f"non-finite orientation in the {branch} branch")
    g = descriptor.lookup(tables, theta)
    if not with_grad:
        diff = g[:n] - g[n:]
        return np.sum(diff * diff, axis=1), None
    if table_derivative == "exact":
        dg = descriptor.lookup_derivative(tables, theta)
    else:
        dg = descriptor.jacobian(tables, theta)
    losses, d1, d2 = angle_gradients(g[:n], g[n:], dg[:n], dg[n:])
    dL_dtheta = np.concatenate([d1, d2])
    for branch, sl in halves:
        if not np.all(np.isfinite(dL_dtheta[sl])):
            raise TrainingError(f"non-finite angle gradient in the {branch} branch")
    grads = net.backward_through_angle(dL_dtheta)
    return losses, grads


def pair_loss(net: OrientationNet, pair: TrainingPair) -> float:
    losses, _ = batch_objective(net, [pair], with_grad=False)
    return float(losses[0])


def pair_gradient(net: OrientationNet, pair: TrainingPair, table_derivative: str = "exact"):
    _, grads = batch_objective(net, [pair], table_derivative=table_derivative)
    return grads


def angular_errors(net: OrientationNet, pairs: list[TrainingPair], batch: int = 200
                   ) -> np.ndarray:
    """|wrap((theta1 - theta2) - gt)| in degrees, eval mode."""
    mode = net.train_mode
    net.eval()
    out = []
    for start in range(0, len(pairs), batch):
        chunk = pairs[start : start + batch]
        n = len(chunk)
        patches, _ = _stack(chunk)
        theta, _ = net.predict_orientation(patches)
        gt = np.array([p.gt_rotation for p in chunk])
        out.append(np.abs(wrap_angle(theta[:n] - theta[n:] - gt)))
    net.train_mode = mode
    return np.degrees(np.concatenate(out)) if out else np.zeros(0)


def train(net: OrientationNet, pairs: list[TrainingPair], config: TrainConfig | None = None,
          heldout: list[TrainingPair] | None = None, checkpoint_path=None,
          checkpoint_every_epoch: bool = False, progress=None):
    """Mini-batch ADAM on the pair objective.  Returns ``(net, LossReport)``.

    Pair order is reshuffled each epoch from a stream derived from
    ``config.seed`` that is independent of the dropout stream.  On a
    non-finite loss the parameters of the last completed epoch are restored
    (and checkpointed when a path is given) before :class:`TrainingError`
    is raised.
    """
    config = config or TrainConfig()
    report = LossReport()
    if config.epochs == 0:
        if checkpoint_path is not None:
            net.save(checkpoint_path)
        return net, report
    if not pairs:
        raise ValueError("training needs at least one pair")
    net.atan2_eps = config.atan2_eps
    net.dropout_rng = np.random.default_rng([config.seed, 1])
    order_rng = np.random.default_rng([config.seed, 2])
    state = T.AdamState.for_params(net.params, lr=config.learning_rate)
    last_good = net.params.copy()
    for epoch in range(config.epochs):
        state.lr = config.lr_at(epoch)
        net.train()
        order = order_rng.permutation(len(pairs))
        total = 0.0
        try:
            for start in range(0, len(pairs), config.batch_size):
                batch = [pairs[i] for i in order[start : start + config.batch_size]]
                losses, grads = batch_objective(net, batch,
                                                table_derivative=config.table_derivative)
                batch_loss = float(losses.sum())
                if not math.isfinite(batch_loss):
                    raise TrainingError(f"non-finite loss in epoch {epoch + 1}")
                total += batch_loss
                scale = 1.0 / len(batch)
                T.adam_step(net.params, {k: v * scale for k, v in grads.items()}, state)
        except TrainingError as exc:
            net.params = last_good
            if checkpoint_path is not None:
                net.save(checkpoint_path)
            raise TrainingError(str(exc), last_good=last_good) from None
        net.eval()
        held = float(np.mean(angular_errors(net, heldout))) if heldout else math.nan
        report.add(epoch + 1, total / len(pairs), state.lr, held)
        last_good = net.params.copy()
        if checkpoint_path is not None and checkpoint_every_epoch:
            net.save(checkpoint_path)
        if progress is not None:
            progress(report.epochs[-1])
        log.debug("epoch %d loss %.5f lr %.2e heldout %.2f deg", epoch + 1,
                  report.epochs[-1]["mean_loss"], state.lr, held)
    net.eval()
    if checkpoint_path is not None:
        net.save(checkpoint_path)
    return net, report


def write_loss_csv(path, report: LossReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "lr", "heldout_error_deg"])
        for e in report.epochs:
            w.writerow([e["epoch"], repr(e["mean_loss"]), repr(e["lr"]),
                        repr(e["heldout_error_deg"])])


def ablation(pairs, heldout, config: TrainConfig | None = None, activations=ACTIVATIONS,
             progress=None, nets: dict | None = None) -> list[dict]:
    """Train one network per activation with identical seeds and data; held-out errors.

    Trained networks are stored in ``nets`` by activation name when given.
    """
    config = config or TrainConfig()
    rows = []
    for act in activations:
        start = time.perf_counter()
        net = OrientationNet(ArchitectureSpec.for_activation(act), seed=config.seed)
        net, report = train(net, pairs, config)
        err = angular_errors(net, heldout)
        if nets is not None:
            nets[act] = net
        losses = report.losses
        rows.append(dict(activation=act, median_error_deg=float(np.median(err)),
                         mean_error_deg=float(np.mean(err)),
                         first_loss=losses[0] if losses else math.nan,
                         final_loss=losses[-1] if losses else math.nan,
                         seconds=time.perf_counter() - start))
        if progress is not None:
            progress(rows[-1])
    return rows


ABLATION_FIELDS = ("activation", "median_error_deg", "mean_error_deg", "first_loss", "final_loss")


def write_ablation_csv(path, rows: list[dict]) -> None:
    """Timing is left out so equal inputs give equal files."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_FIELDS)
        for r in rows:
            w.writerow([r["activation"]] + [f"{r[k]:.6f}" for k in ABLATION_FIELDS[1:]])
