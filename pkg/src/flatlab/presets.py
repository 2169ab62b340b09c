"""Experiment presets transcribed from the training-details table.

Each preset binds an architecture, a data source, a loss and one or more
optimizer stages.  Stages run in order, each starting from the previous
stage's parameters.  ``batch=None`` is full-batch gradient descent (the
table's batch size 100 equals n).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

from .losses import LossKind
from .models import ArchSpec
from .optimizers import TrainConfig

FULL_WIDTH = 500
REDUCED_WIDTH = 100
DEFAULT_LN_EPS = 0.01


@dataclass(frozen=True)
class Stage:
    lr: float
    rho: float
    batch: Optional[int]
    wd: float
    epochs: int

    def scaled_epochs(self, scale: float) -> int:
        return max(1, int(round(self.epochs * scale)))


@dataclass(frozen=True)
class ExperimentPreset:
    id: str
    title: str
    kind: str = "NoBias"
    activation: str = "relu"
    depth: int = 2
    data: str = "xor"  # xor | ball | circle
    d: int = 30
    n: int = 100
    loss: str = "mse"
    stages: tuple = ()
    init: str = "uniform"
    ln_eps: float = DEFAULT_LN_EPS
    proj_radius: Optional[float] = None
    construction: Optional[str] = None
    interpreted: bool = False
    extras: tuple = field(default=())

    @property
    def trains(self) -> bool:
        return bool(self.stages)

    def arch(self, scale: float = 1.0, width: Optional[int] = None) -> ArchSpec:
        if width is None:
            width = FULL_WIDTH if scale >= 1.0 else REDUCED_WIDTH
        return ArchSpec(self.kind, width, self.d, self.depth, self.activation, self.ln_eps)

    def loss_kind(self) -> LossKind:
        return LossKind.parse(self.loss)

    def configs(self, scale: float = 1.0, seed: int = 0, log_points: int = 50):
        """One TrainConfig per stage with epochs multiplied by ``scale``."""
        out = []
        for st in self.stages:
            ep = st.scaled_epochs(scale)
            out.append(TrainConfig(learning_rate=st.lr, weight_decay=st.wd, sam_rho=st.rho,
                                   batch_size=st.batch, epochs=ep,
                                   projection_radius=self.proj_radius, seed=seed,
                                   log_every=max(1, ep // log_points), loss=self.loss_kind(),
                                   init=self.init))
        return out


def _S(lr, rho, batch, wd, epochs):
    return Stage(lr, rho, batch, wd, int(epochs))


FULL = None  # batch size equal to n

_PRESETS = [
    ExperimentPreset("fig1a", "NoBias, GD + weight decay, xor", "NoBias",
                     stages=(_S(0.01, 0, FULL, 0.05, 1e5),)),
    ExperimentPreset("fig1b", "NoBias, 1-SAM, xor", "NoBias",
                     stages=(_S(0.01, 0.05, 1, 0, 1e5),)),
    ExperimentPreset("fig2", "SimBN, 1-SAM, xor", "SimBN",
                     stages=(_S(0.005, 0.1, 1, 0, 1e5), _S(0.003, 1, 1, 0, 1e5)),
                     interpreted=True),
    ExperimentPreset("tbl2", "SimBN, 1-SAM, xor: top first-layer neurons", "SimBN",
                     stages=(_S(0.005, 0.1, 1, 0, 1e5), _S(0.003, 1, 1, 0, 1e5)),
                     interpreted=True, extras=("neuron_report",)),
    ExperimentPreset("fig3a", "Bias, GD + weight decay, xor", "Bias",
                     stages=(_S(0.01, 0, FULL, 0.05, 1e5),)),
    ExperimentPreset("fig3b", "Bias, 1-SAM, xor", "Bias",
                     stages=(_S(0.01, 0.05, 1, 0, 2e5), _S(0.01, 0.1, 1, 0, 4e5)),
                     interpreted=True),
    ExperimentPreset("fig4a", "Softplus Bias, SGD + weight decay, xor", "Bias", "softplus",
                     stages=(_S(0.001, 0, 1, 0.05, 1e5),)),
    ExperimentPreset("fig4b", "Softplus Bias, 1-SAM, xor", "Bias", "softplus",
                     stages=(_S(0.0005, 0.05, 1, 0, 1e5), _S(0.001, 0.1, 1, 0, 1e5),
                             _S(0.005, 1, 1, 0, 5e3)),
                     interpreted=True),
    ExperimentPreset("fig5", "Memorizing Bias interpolant on circle data", "Bias",
                     data="circle", d=2, n=8, construction="memorize_bias"),
    ExperimentPreset("fig6a", "SimLN, 1-SAM, xor", "SimLN",
                     stages=(_S(0.1, 0.1, 1, 0, 1e5),), init="simln-downscale"),
    ExperimentPreset("fig6b", "SimLN, 1-SAM with first-layer projection, xor", "SimLN",
                     stages=(_S(0.01, 0.1, 1, 0, 5e2), _S(0.01, 0.5, 1, 0, 5e2),
                             _S(0.01, 1, 1, 0, 5e2)),
                     init="simln-downscale", proj_radius=10.0, interpreted=True),
    ExperimentPreset("figB1a", "NoBias, 1-SAM, uniform ball", "NoBias", data="ball", d=10,
                     stages=(_S(0.01, 0.2, 1, 0, 1e5),)),
    ExperimentPreset("figB1b", "Bias, 1-SAM, uniform ball", "Bias", data="ball", d=10,
                     stages=(_S(0.01, 0.2, 1, 0, 1e5),)),
    ExperimentPreset("figB2a", "NoBias, SGD + weight decay, xor, logistic", "NoBias",
                     loss="logistic:0.2", stages=(_S(0.1, 0, 10, 0.01, 1e5),)),
    ExperimentPreset("figB2b", "NoBias, 1-SAM, xor, logistic", "NoBias",
                     loss="logistic:0.2", stages=(_S(0.1, 0.2, 1, 0, 1e5),)),
    ExperimentPreset("figB3a", "Bias, SGD + weight decay, xor, logistic", "Bias",
                     loss="logistic:0.2", stages=(_S(0.01, 0, 1, 0.05, 1e5),)),
    ExperimentPreset("figB3b", "Bias, 1-SAM, xor, logistic", "Bias",
                     loss="logistic:0.2", stages=(_S(0.1, 0.2, 1, 0, 1e5),)),
    ExperimentPreset("figB4", "SimBN, 1-SAM, xor, logistic", "SimBN",
                     loss="logistic:0.2", stages=(_S(0.1, 0.2, 1, 0, 4e4),)),
    ExperimentPreset("figB5", "SimLN, 1-SAM, xor, logistic", "SimLN",
                     loss="logistic:0.2", stages=(_S(1, 0.5, 1, 0, 1e3), _S(1, 1, 1, 0, 1e5)),
                     init="simln-downscale", interpreted=True),
    ExperimentPreset("figB6a", "3-layer Bias, SGD + weight decay, xor, logistic", "Bias",
                     depth=3, loss="logistic:0.2", stages=(_S(0.01, 0, 1, 0.05, 1e5),)),
    ExperimentPreset("figB6b", "3-layer Bias, 1-SAM, xor, logistic", "Bias",
                     depth=3, loss="logistic:0.2", stages=(_S(0.01, 0.05, 1, 0, 1e5),)),
]

PRESETS = {p.id: p for p in _PRESETS}


class PresetError(KeyError):
    pass


def get_preset(preset_id: str) -> ExperimentPreset:
    try:
        return PRESETS[preset_id]
    except KeyError:
        raise PresetError(f"unknown preset {preset_id!r}; known: {', '.join(PRESETS)}") from None


TABLE_COLUMNS = ("preset", "stage", "lr", "rho", "batch", "wd", "epochs")


def table_rows():
    """Flat transcription (one line per stage) used by the golden-file test."""
    rows = []
    for p in _PRESETS:
        for k, st in enumerate(p.stages):
            rows.append((p.id, k, st.lr, st.rho, "n" if st.batch is None else st.batch,
                         st.wd, st.epochs))
    return rows


def write_table(path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        for r in table_rows():
            w.writerow([f"{v:g}" if isinstance(v, float) else v for v in r])
