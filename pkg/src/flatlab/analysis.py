"""Generalization metrics and first-layer inspections."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .models import ModelParams, evaluate


class AnalysisError(ValueError):
    pass


def _reference(reference):
    return getattr(reference, "inputs", reference)


def _outputs(spec, params, test_set, reference):
    if test_set.n == 0:
        raise AnalysisError("empty test set")
    return evaluate(spec, params, test_set.inputs, reference=_reference(reference))


def zero_one_error(spec, params, test_set, reference=None) -> float:
    """Fraction of points with y f(x) <= 0; an output of exactly 0 counts as an error.

    ``reference`` supplies SimBN statistics (the training set); defaults to
    the test inputs themselves.
    """
    if np.any(test_set.labels == 0):
        raise AnalysisError("zero-one error needs nonzero labels")
    out = _outputs(spec, params, test_set, reference)
    return float(np.mean(test_set.labels * out <= 0))


def mse_test_loss(spec, params, test_set, reference=None) -> float:
    out = _outputs(spec, params, test_set, reference)
    return float(np.mean((out - test_set.labels) ** 2))


def classification_summary(spec, params, test_set, reference=None):
    """(zero-one error, mse) from a single forward pass.

    For +-1 labels every misclassified point has squared error >= 1, so
    mse >= zero-one error; this is checked on every call.
    """
    if test_set.n == 0:
        raise AnalysisError("empty test set")
    out = _outputs(spec, params, test_set, reference)
    y = test_set.labels
    err = float(np.mean(y * out <= 0))
    mse = float(np.mean((out - y) ** 2))
    if np.all(np.abs(y) == 1) and mse < err - 1e-12:
        raise AnalysisError(f"mse {mse} below zero-one error {err}")
    return err, mse


@dataclass
class NeuronReport:
    """Per-neuron first-layer summary, largest rows first."""

    rows: np.ndarray  # columns: index, w1, w2, tail_norm, row_norm, |W2|
    column_norms: np.ndarray  # norms of W1[:, 0] and W1[:, 1]
    max_tail_column_norm: float

    COLUMNS = ("index", "w1", "w2", "tail_norm", "row_norm", "abs_w2")

    def top_ratio(self, k: int = 4) -> float:
        """min over the top-k rows of min(|w1|, |w2|) / tail_norm."""
        top = self.rows[:k]
        head = np.minimum(np.abs(top[:, 1]), np.abs(top[:, 2]))
        with np.errstate(divide="ignore"):
            return float(np.min(head / top[:, 3]))

    def column_ratio(self) -> float:
        with np.errstate(divide="ignore"):
            return float(np.min(self.column_norms) / self.max_tail_column_norm)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([int(r[0])] + [f"{v:.10g}" for v in r[1:]])

    def summary(self, k: int = 4) -> str:
        lines = [f"top-{k} neurons by first-layer norm:"]
        for r in self.rows[:k]:
            lines.append(f"  #{int(r[0]):4d}  w1={r[1]: .4f}  w2={r[2]: .4f}  "
                         f"tail={r[3]:.4f}  norm={r[4]:.4f}  |W2|={r[5]:.4f}")
        c1, c2 = self.column_norms
        lines.append(f"column norms: {c1:.4f}, {c2:.4f}; max remaining {self.max_tail_column_norm:.4f}")
        return "\n".join(lines)


def neuron_report(params: ModelParams, top_k: int = 4) -> NeuronReport:
    if len(params.W) != 2:
        raise AnalysisError("neuron report needs a depth-2 model")
    W1 = np.asarray(params.W1)
    m, d = W1.shape
    if top_k > m:
        raise AnalysisError(f"top_k={top_k} exceeds width {m}")
    tail = np.linalg.norm(W1[:, 2:], axis=1)
    norms = np.linalg.norm(W1, axis=1)
    order = np.argsort(-norms, kind="stable")
    rows = np.column_stack([order, W1[order, 0], W1[order, 1], tail[order], norms[order],
                            np.abs(params.W2)[order]])
    cols = np.linalg.norm(W1, axis=0)
    max_tail = float(cols[2:].max()) if d > 2 else 0.0
    return NeuronReport(rows, cols[:2], max_tail)


def feature_alignment(params: ModelParams, eps: float = 0.1) -> float:
    """Norm-weighted fraction of neurons with ||W1_i[3:]|| <= eps ||W1_i||."""
    W1 = np.asarray(params.W1)
    if W1.shape[1] < 3:
        raise AnalysisError("feature alignment needs d >= 3")
    norms = np.linalg.norm(W1, axis=1)
    total = norms.sum()
    if total == 0:
        return 1.0
    aligned = np.linalg.norm(W1[:, 2:], axis=1) <= eps * norms
    return float(norms[aligned].sum() / total)
