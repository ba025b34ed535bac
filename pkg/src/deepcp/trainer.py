"""Full-batch gradient descent on the deep CP model."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .cp_model import DeepCPFactorization, mode_vectors
from .gradients import (SQUARE_LOSS, EntryLoss, GradientSet, empirical_loss, gradient_from_tensor,
                        loss_gradient_tensor, observed_entries)
from .tensor_core import SparseEntrySet

log = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_EPOCHS = "max_epochs"
DIVERGED = "diverged"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 10000
    log_every: int = 100
    stop_train_loss: float = 1e-8
    seed: int = 0
    divergence_guard: float = 1e8

    def __post_init__(self):
        if not (self.learning_rate > 0):
            raise ValueError("learning_rate must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")
        if self.log_every < 1:
            raise ValueError("log_every must be at least 1")
        if self.stop_train_loss < 0:
            raise ValueError("stop_train_loss must be nonnegative")


@dataclass
class TrajectoryLog:
    records: list = field(default_factory=list)
    config: Optional[TrainConfig] = None
    init: object = None
    status: str = MAX_EPOCHS
    final_epoch: int = 0
    meta: dict = field(default_factory=dict)

    def append(self, record):
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("trajectory records must have strictly increasing epochs")
        self.records.append(record)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(rec, name) for rec in self.records], dtype=float)

    @property
    def final(self):
        return self.records[-1]


def train_loss(model: DeepCPFactorization, data, loss: EntryLoss = SQUARE_LOSS) -> float:
    return empirical_loss(model, observed_entries(data), loss)


def test_loss(model: DeepCPFactorization, heldout, loss: EntryLoss = SQUARE_LOSS) -> float:
    heldout = getattr(heldout, "heldout", heldout)
    if len(heldout) == 0:
        raise ValueError("held-out set is empty")
    return empirical_loss(model, heldout, loss)


# not a test function; keeps pytest from collecting it when imported into test modules
test_loss.__test__ = False


def gd_step(model: DeepCPFactorization, grads: GradientSet, eta: float) -> DeepCPFactorization:
    """In-place update theta <- theta - eta * g; returns the model."""
    for n in range(model.order):
        model.w[n] -= eta * grads.g_w[n]
        model.A[n] -= eta * grads.g_A[n]
    return model


Hook = Callable[[int, DeepCPFactorization, SparseEntrySet, float], object]


def train(model: DeepCPFactorization, data, config: TrainConfig, hook: Optional[Hook] = None,
          loss: EntryLoss = SQUARE_LOSS, init=None) -> TrajectoryLog:
    """Run gradient descent on ``model`` in place.

    ``hook(epoch, model, grad_tensor, train_loss)`` is called at epoch 0, every
    ``log_every`` epochs, and at the last epoch; whatever it returns is stored
    as a trajectory record. Without a hook a minimal record is stored.
    """
    obs = observed_entries(data)
    traj = TrajectoryLog(config=config, init=init,
                         meta={"dims": tuple(model.dims), "depths": tuple(model.depths)})
    hook = hook or _basic_record
    eta = config.learning_rate
    status = MAX_EPOCHS
    epoch = 0
    while True:
        B = mode_vectors(model)
        g_tensor = loss_gradient_tensor(model, obs, loss, B)
        current = empirical_loss(model, obs, loss, B)
        blew_up = not np.isfinite(current) or current > config.divergence_guard
        if blew_up:
            status = DIVERGED
        elif current <= config.stop_train_loss:
            status = CONVERGED
        done = blew_up or status == CONVERGED or epoch >= config.max_epochs
        if epoch % config.log_every == 0 or done:
            if blew_up:
                traj.append(_DivergedRecord(epoch, float(current)))
            else:
                traj.append(hook(epoch, model, g_tensor, current))
        if done:
            break
        gd_step(model, gradient_from_tensor(model, g_tensor), eta)
        epoch += 1
    traj.status = status
    traj.final_epoch = epoch
    log.debug("training stopped at epoch %d with status %s", epoch, status)
    return traj


@dataclass
class _BasicRecord:
    epoch: int
    train_loss: float


@dataclass
class _DivergedRecord:
    epoch: int
    train_loss: float


def _basic_record(epoch, model, g_tensor, current):
    return _BasicRecord(epoch, float(current))


def write_trajectory_csv(traj: TrajectoryLog, path, top_k: int = 10) -> list[str]:
    """One row per logged epoch; returns the column names.

    Columns: epoch, train_loss, test_loss, epsilon, then for the ``top_k``
    blocks with the largest final deep norm: block_norm_shallow_<r>,
    block_norm_deep_<r>, delta_<r>.
    """
    recs = [r for r in traj.records if hasattr(r, "deep_norms")]
    if not recs:
        raise ValueError("trajectory has no diagnostics records")
    final = np.asarray(recs[-1].deep_norms)
    order = np.argsort(-final, kind="stable")[:top_k]
    cols = ["epoch", "train_loss", "test_loss", "epsilon"]
    cols += [f"block_norm_shallow_{r}" for r in order]
    cols += [f"block_norm_deep_{r}" for r in order]
    cols += [f"delta_{r}" for r in order]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for rec in recs:
            row = [rec.epoch, _fmt(rec.train_loss), _fmt(rec.test_loss), _fmt(rec.epsilon)]
            row += [_fmt(rec.shallow_norms[r]) for r in order]
            row += [_fmt(rec.deep_norms[r]) for r in order]
            row += [_fmt(rec.delta[r]) if rec.delta is not None else "" for r in order]
            writer.writerow(row)
    return cols


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    return repr(float(x))


def read_trajectory_csv(path) -> dict[str, np.ndarray]:
    """Column name -> float array (blank cells become NaN)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty trajectory file")
    header, body = rows[0], rows[1:]
    cols = {}
    for j, name in enumerate(header):
        cols[name] = np.array([float(row[j]) if row[j] != "" else np.nan for row in body])
    return cols


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
