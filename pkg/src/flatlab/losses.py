"""Squared, truncated squared, and label-smoothed logistic losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K

VARIANTS = ("mse", "truncated", "logistic")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossKind:
    variant: str = "mse"
    param: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise LossError(f"unknown loss {self.variant!r}")
        if self.variant == "truncated" and not self.param > 0:
            raise LossError("truncation level c must be positive")
        if self.variant == "logistic" and not 0 < self.param < 1:
            raise LossError("label smoothing p must lie in (0, 1)")

    @classmethod
    def parse(cls, text: str) -> "LossKind":
        text = text.strip()
        if text == "mse":
            return cls("mse")
        name, _, value = text.partition(":")
        if name not in ("truncated", "logistic") or not value:
            raise LossError(f"cannot parse loss {text!r}")
        return cls(name, float(value))

    def __str__(self):
        return "mse" if self.variant == "mse" else f"{self.variant}:{self.param:g}"

    @property
    def code(self) -> int:
        return VARIANTS.index(self.variant)


MSE = LossKind("mse")


def Truncated(c: float) -> LossKind:
    return LossKind("truncated", c)


def Logistic(p: float) -> LossKind:
    return LossKind("logistic", p)


def gamma_p(p: float) -> float:
    """Logit target magnitude ln((1 - p) / p)."""
    if not 0 < p < 1:
        raise LossError(f"p={p} outside (0, 1)")
    return math.log((1.0 - p) / p)


def _check_target(kind, target):
    if kind.variant == "logistic" and target not in (0, 1):
        raise LossError(f"logistic loss needs a binary target, got {target}")


def loss_value(kind: LossKind, prediction: float, target: float) -> float:
    _check_target(kind, target)
    r = prediction - target
    if kind.variant == "mse":
        return r * r
    if kind.variant == "truncated":
        c = kind.param
        ar = abs(r)
        if ar <= c:
            return r * r
        if ar <= 2 * c:
            return -r * r + 4 * c * ar - 2 * c * c
        return 2 * c * c
    # observed label b gets probability mass 1 - p
    p, a, b = kind.param, prediction, target
    log_z = np.logaddexp(0.0, a)
    return float(-(1 - p) * (b * a - log_z) - p * ((1 - b) * a - log_z))


def loss_derivatives(kind: LossKind, prediction: float, target: float):
    """(d loss / d prediction, d^2 loss / d prediction^2)."""
    _check_target(kind, target)
    _, d1, d2 = K.loss_terms(float(prediction), float(target), kind.code, float(kind.param))
    return d1, d2


def minimal_value(kind: LossKind) -> float:
    if kind.variant == "logistic":
        p = kind.param
        return -p * math.log(p) - (1 - p) * math.log(1 - p)
    return 0.0


def binary_targets(labels) -> np.ndarray:
    """Map +-1 labels to b = (y + 1) / 2."""
    y = np.asarray(labels, dtype=np.float64)
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise LossError("logistic training needs +-1 labels")
    return (y + 1.0) / 2.0


def training_targets(kind: LossKind, labels) -> np.ndarray:
    """Targets fed to the loss: raw labels, or binary b for logistic."""
    return binary_targets(labels) if kind.variant == "logistic" else np.asarray(labels, float)


def interpolation_targets(kind: LossKind, labels) -> np.ndarray:
    """Outputs an interpolating network must produce (gamma_p (2b - 1) for logistic)."""
    if kind.variant == "logistic":
        return gamma_p(kind.param) * (2.0 * binary_targets(labels) - 1.0)
    return np.asarray(labels, dtype=np.float64)


def default_truncation(d: int) -> LossKind:
    return Truncated(math.sqrt(d + 1))


def loss_array(kind: LossKind, predictions, targets) -> np.ndarray:
    """Elementwise loss values (vectorized ``loss_value``)."""
    a = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if kind.variant == "mse":
        return (a - t) ** 2
    if kind.variant == "truncated":
        c = kind.param
        r = np.abs(a - t)
        mid = -r * r + 4 * c * r - 2 * c * c
        return np.where(r <= c, r * r, np.where(r <= 2 * c, mid, 2 * c * c))
    p = kind.param
    log_z = np.logaddexp(0.0, a)
    return -(1 - p) * (t * a - log_z) - p * ((1 - t) * a - log_z)
