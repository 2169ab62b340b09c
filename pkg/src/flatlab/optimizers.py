"""Gradient descent with weight decay, 1-SAM, and first-layer projection."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import _kernels as K
from .analysis import classification_summary
from .data import LabeledDataset
from .losses import MSE, LossKind, loss_array, training_targets
from .models import ArchSpec, ModelParams, evaluate, init_params, write_checkpoint
from .sharpness import grad_closure, hutchinson_trace, jac_surrogate, path_norm

LOG_FIELDS = ("epoch", "train_loss", "test_loss", "zero_one_error", "hutchinson_trace",
              "jac_surrogate", "path_norm")


PROJECTION_RTOL = 1e-12


class TrainError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, epoch, log):
        super().__init__(f"training diverged at epoch {epoch}")
        self.epoch = epoch
        self.log = log


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    weight_decay: float = 0.0
    sam_rho: float = 0.0
    batch_size: Optional[int] = None  # None means full batch
    epochs: int = 1000
    projection_radius: Optional[float] = None
    seed: int = 0
    log_every: int = 100
    loss: LossKind = MSE
    hutchinson_probes: int = 32
    stop_gradient: bool = False
    init: str = "uniform"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise TrainError("learning rate must be positive")
        if self.weight_decay < 0 or self.sam_rho < 0:
            raise TrainError("weight decay and rho must be nonnegative")
        if self.sam_rho > 0 and self.batch_size != 1:
            raise TrainError("SAM is supported with batch size 1 only")
        if self.batch_size is not None and self.batch_size < 1:
            raise TrainError("batch size must be positive")
        if self.epochs < 0 or self.log_every < 1:
            raise TrainError("epochs must be >= 0 and log_every >= 1")
        if self.projection_radius is not None and not self.projection_radius > 0:
            raise TrainError("projection radius must be positive")
        if self.hutchinson_probes < 8:
            raise TrainError("hutchinson estimates need at least 8 probes")

    def batch_for(self, n: int) -> int:
        return n if self.batch_size is None else min(self.batch_size, n)

    def evolve(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


@dataclass
class TrajectoryLog:
    rows: list = field(default_factory=list)

    def append(self, row: dict):
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise TrainError("log epochs must increase")
        self.rows.append(row)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    @property
    def last(self) -> dict:
        return self.rows[-1]

    def __len__(self):
        return len(self.rows)

    def extend(self, other: "TrajectoryLog"):
        for r in other.rows:
            self.append(r)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_FIELDS)
            for r in self.rows:
                w.writerow([r["epoch"]] + [f"{r[k]:.17g}" for k in LOG_FIELDS[1:]])

    @classmethod
    def read_csv(cls, path) -> "TrajectoryLog":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != LOG_FIELDS:
                raise TrainError(f"unexpected trajectory header {header}")
            log = cls()
            for line in reader:
                row = {"epoch": int(line[0])}
                row.update({k: float(v) for k, v in zip(LOG_FIELDS[1:], line[1:])})
                log.rows.append(row)
        return log


def _arrays(dataset, loss):
    return (np.ascontiguousarray(dataset.inputs),
            np.ascontiguousarray(training_targets(loss, dataset.labels)))


def _epoch(spec, theta, X, Y, order, cfg, batch, rho):
    radius = cfg.projection_radius or 0.0
    status = K.run_epoch(theta, X, Y, order, batch, cfg.learning_rate, cfg.weight_decay, rho,
                         radius, *spec.codes(), cfg.loss.code, float(cfg.loss.param),
                         cfg.stop_gradient)
    return status < 0


def gd_wd_epoch(spec: ArchSpec, params: ModelParams, dataset: LabeledDataset,
                cfg: TrainConfig) -> ModelParams:
    """One full-batch step theta <- theta - lr (grad L + wd theta)."""
    theta = params.flatten()
    X, Y = _arrays(dataset, cfg.loss)
    if not _epoch(spec, theta, X, Y, np.arange(dataset.n), cfg, dataset.n, 0.0):
        raise DivergenceError(0, TrajectoryLog())
    return ModelParams.unflatten(spec, theta)


def one_sam_epoch(spec: ArchSpec, params: ModelParams, dataset: LabeledDataset,
                  cfg: TrainConfig, rng=None) -> ModelParams:
    """One shuffled pass of per-example SAM steps of radius ``cfg.sam_rho``."""
    if not cfg.sam_rho > 0:
        raise TrainError("1-SAM needs rho > 0")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    theta = params.flatten()
    X, Y = _arrays(dataset, cfg.loss)
    order = rng.permutation(dataset.n)
    if not _epoch(spec, theta, X, Y, order, cfg, 1, cfg.sam_rho):
        raise DivergenceError(0, TrajectoryLog())
    return ModelParams.unflatten(spec, theta)


def project_first_layer(params: ModelParams, radius: float) -> ModelParams:
    """Rescale ||W1||_F and ||b1|| independently down to ``radius``.

    Norms within a relative 1e-12 of the radius count as inside, which makes
    the map idempotent under rounding.
    """
    if not radius > 0:
        raise TrainError("radius must be positive")
    limit = radius * (1.0 + PROJECTION_RTOL)
    out = params.copy()
    nw = np.linalg.norm(out.W[0])
    if nw > limit:
        out.W[0] = out.W[0] * (radius / nw)
    if out.b1 is not None:
        nb = np.linalg.norm(out.b1)
        if nb > limit:
            out.b1 = out.b1 * (radius / nb)
    return out


def _log_row(spec, theta, epoch, train, test, cfg):
    X, Y = _arrays(train, cfg.loss)
    out = evaluate(spec, theta, X)
    tr = float(np.mean(loss_array(cfg.loss, out, Y)))
    Xt, Yt = _arrays(test, cfg.loss)
    out_t = evaluate(spec, theta, Xt, reference=X)
    te = float(np.mean(loss_array(cfg.loss, out_t, Yt)))
    err, _ = classification_summary(spec, theta, test, reference=train)
    hut, _ = hutchinson_trace(grad_closure(spec, train, cfg.loss, cfg.stop_gradient), theta,
                              cfg.hutchinson_probes, seed=(cfg.seed, epoch))
    row = {"epoch": epoch, "train_loss": tr, "test_loss": te, "zero_one_error": err,
           "hutchinson_trace": hut, "jac_surrogate": jac_surrogate(spec, theta, train),
           "path_norm": path_norm(ModelParams.unflatten(spec, theta)) if spec.depth == 2 else math.nan}
    return row


def train(spec: ArchSpec, dataset: LabeledDataset, test_set: LabeledDataset, cfg: TrainConfig,
          init: Optional[ModelParams] = None, rng=None, epoch_offset: int = 0,
          checkpoint_path=None, log_start: bool = True, monitor=None):
    """Run ``cfg.epochs`` epochs and return (final params, TrajectoryLog).

    GD+WD uses one full-batch step per epoch unless a smaller batch size is
    set; rho > 0 selects 1-SAM.  Shuffles come from ``rng`` (seeded from
    ``cfg.seed`` by default), so equal seeds give identical trajectories.
    Rows are logged at the first epoch, every ``log_every`` epochs, and the
    last epoch.  ``epoch_offset`` numbers the epochs for staged runs.
    ``monitor(epoch, params)``, if given, is called at every logged epoch.
    """
    if dataset.d != spec.input_dim or test_set.d != spec.input_dim:
        raise TrainError("dataset dimension does not match the architecture")
    if init is None:
        init = init_params(spec, cfg.init, seed=cfg.seed)
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    if cfg.projection_radius is not None:
        # the constraint must also hold at the first logged row
        init = project_first_layer(init, cfg.projection_radius)
    theta = np.ascontiguousarray(init.flatten())
    X, Y = _arrays(dataset, cfg.loss)
    n = dataset.n
    batch = cfg.batch_for(n)
    shuffle = cfg.sam_rho > 0 or batch < n
    log = TrajectoryLog()
    if log_start:
        log.append(_log_row(spec, theta, epoch_offset, dataset, test_set, cfg))
        if monitor is not None:
            monitor(epoch_offset, ModelParams.unflatten(spec, theta))
    for e in range(1, cfg.epochs + 1):
        order = rng.permutation(n) if shuffle else np.arange(n)
        if not _epoch(spec, theta, X, Y, order, cfg, batch, cfg.sam_rho):
            raise DivergenceError(epoch_offset + e, log)
        if e % cfg.log_every == 0 or e == cfg.epochs:
            row = _log_row(spec, theta, epoch_offset + e, dataset, test_set, cfg)
            if not all(math.isfinite(v) for k, v in row.items() if k != "path_norm"):
                raise DivergenceError(epoch_offset + e, log)
            log.append(row)
            if monitor is not None:
                monitor(epoch_offset + e, ModelParams.unflatten(spec, theta))
    final = ModelParams.unflatten(spec, theta)
    if checkpoint_path is not None:
        write_checkpoint(spec, final, checkpoint_path)
    return final, log
