"""Closed-form flattest interpolants: memorizing and generalizing.

Every constructor returns ``(ArchSpec, ModelParams)``.  Unused neurons are
zero in every field, SimBN scales included.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .analysis import zero_one_error
from .data import LabeledDataset, is_complete_xor_set, xor_labels
from .losses import MSE, LossKind
from .models import ArchSpec, ModelParams, evaluate
from .sharpness import (PreconditionWarning, exact_trace, full_fd_trace, interpolation_residual,
                        loss_closure, theoretical_min)

SLACK_FRACTION = 1e-3
PERCEPTRON_CAP = 100_000


class ConstructionError(ValueError):
    pass


class NotExtremeError(ConstructionError):
    def __init__(self, index):
        super().__init__(f"input {index} is not an extreme point of the training set")
        self.index = index


class SlackTooLargeError(ConstructionError):
    pass


def _margins(X, W):
    n = len(X)
    G = W @ X.T  # G[i, j] = w_i . x_j
    own = np.diag(G).copy()
    np.fill_diagonal(G, -np.inf)
    others = G.max(axis=1) if n > 1 else np.full(n, -np.inf)
    return own - others


def find_separators(X):
    """Unit w_i with w_i.x_i > w_i.x_j for all j != i, and their margins.

    Points on a common sphere use w_i = x_i / ||x_i||; otherwise a
    perceptron on the differences x_i - x_j is run per point.
    """
    X = np.asarray(getattr(X, "inputs", X), dtype=np.float64)
    n = len(X)
    norms = np.linalg.norm(X, axis=1)
    if n and norms.min() > 0 and np.allclose(norms, norms[0], rtol=1e-12, atol=0):
        W = X / norms[:, None]
        mu = _margins(X, W)
        bad = np.flatnonzero(~(mu > 0))
        if bad.size:
            raise NotExtremeError(int(bad[0]))
        return W, mu
    W = np.empty_like(X)
    for i in range(n):
        D = X[i] - np.delete(X, i, axis=0)
        if np.any(np.all(D == 0, axis=1)):
            raise NotExtremeError(i)
        Dn = D / np.linalg.norm(D, axis=1, keepdims=True)
        w = Dn.mean(axis=0)
        for _ in range(PERCEPTRON_CAP):
            s = Dn @ w
            k = int(np.argmin(s))
            if s[k] > 1e-9 * max(np.linalg.norm(w), 1.0):
                break
            w = w + Dn[k]
        else:
            raise NotExtremeError(i)
        W[i] = w / np.linalg.norm(w)
    mu = _margins(X, W)
    bad = np.flatnonzero(~(mu > 0))
    if bad.size:
        raise NotExtremeError(int(bad[0]))
    return W, mu


def _pick_slack(eps, mu):
    mu_min = float(np.min(mu))
    if eps is None:
        return SLACK_FRACTION * mu_min
    if eps >= mu_min:
        raise SlackTooLargeError(f"slack {eps} must be below the minimum margin {mu_min}")
    return eps


def memorize_bias(dataset: LabeledDataset, eps: Optional[float] = None, depth: int = 2,
                  activation: str = "relu"):
    """One dedicated neuron per training point at every hidden layer.

    For depth D the per-neuron scales are r_i = (||x_i'|| / |y_i|)^(1/D)
    and u_i = |y_i| r_i^(D-1); samples with y_i = 0 get all-zero rows.
    Fresh inputs leave every first-layer neuron dead, so f = 0 off the
    training support.
    """
    X, y = dataset.inputs, dataset.labels
    n, d = X.shape
    W, mu = find_separators(X)
    eps = _pick_slack(eps, mu)
    xn = np.sqrt(np.sum(X * X, axis=1) + 1.0)
    nz = y != 0
    r = np.ones(n)
    r[nz] = (xn[nz] / np.abs(y[nz])) ** (1.0 / depth)
    u = np.where(nz, np.abs(y) * r ** (depth - 1), 0.0)
    W1 = (u / eps)[:, None] * W
    b1 = u * (-np.sum(W * X, axis=1) + eps) / eps
    # negative off-diagonals keep every other middle neuron strictly dead
    # at each training input, so the minimum is not sitting on a relu kink
    mid = -np.outer(1.0 / r, np.ones(n))
    np.fill_diagonal(mid, 1.0 / r)
    hidden = [mid.copy() for _ in range(depth - 2)]
    WD = np.sign(y) / r
    spec = ArchSpec("Bias", n, d, depth, activation)
    return spec, ModelParams([W1, *hidden, WD], b1)


def xor_pattern_rows(d: int, scale: float):
    """Rows scale * [(-1)^i, (-1)^j, 0, ...] for neuron index 2i + j."""
    rows = np.zeros((4, d))
    signs = np.zeros(4)
    for i in (0, 1):
        for j in (0, 1):
            k = 2 * i + j
            rows[k, 0] = scale * (-1) ** i
            rows[k, 1] = scale * (-1) ** j
            signs[k] = (-1) ** (i + j)
    return rows, signs


def good_xor_r(d: int, mode: str = "equality") -> float:
    """Neuron scale: (d+1)^(1/4) attains the Jacobian bound; (d^2+1)^(1/4) is the printed value."""
    if mode == "equality":
        return (d + 1) ** 0.25
    if mode == "printed":
        return (d * d + 1) ** 0.25
    raise ConstructionError(f"unknown r mode {mode!r}")


def _pad(m, rows, *vecs):
    k = len(rows)
    if m < k:
        raise ConstructionError(f"width {m} is below the {k} neurons the construction needs")
    W1 = np.zeros((m, rows.shape[1]))
    W1[:k] = rows
    out = [W1]
    for v in vecs:
        full = np.zeros(m)
        full[:k] = v
        out.append(full)
    return out


def good_xor_bias(d: int, m: int = 4, r_mode: str = "equality"):
    """Four-neuron Bias interpolant of x1 * x2 on the whole cube."""
    if d < 2:
        raise ConstructionError("need d >= 2")
    r = good_xor_r(d, r_mode)
    rows, signs = xor_pattern_rows(d, r)
    W1, b1, W2 = _pad(m, rows, np.full(4, -r), signs / r)
    return ArchSpec("Bias", m, d), ModelParams([W1, W2], b1)


def _simln_scales(c, eps):
    """(r_i, u_i) per sample: unit-norm regime unless 2 c_i < eps."""
    r = np.ones_like(c)
    u = np.full_like(c, 2.0 * eps)
    small = (c > 0) & (2.0 * c < eps)
    r[small] = np.sqrt(eps / c[small])
    u[small] = np.sqrt(eps * c[small])
    zero = c == 0
    r[zero] = 0.0
    u[zero] = 0.0
    return r, u


def memorize_simln(dataset: LabeledDataset, ln_eps: float, delta: Optional[float] = None):
    X, y = dataset.inputs, dataset.labels
    n, d = X.shape
    W, mu = find_separators(X)
    delta = _pick_slack(delta, mu)
    c = np.sqrt(np.sum(X * X, axis=1) + 1.0) * np.abs(y)
    r, u = _simln_scales(c, ln_eps)
    W1 = (u / delta)[:, None] * W
    b1 = u * (-np.sum(W * X, axis=1) + delta) / delta
    W2 = r * y
    return ArchSpec("SimLN", n, d, ln_epsilon=ln_eps), ModelParams([W1, W2], b1)


def _check_cube(X):
    if not np.all(np.abs(X) == 1.0):
        raise ConstructionError("inputs must be hypercube vertices")
    if len(np.unique(X, axis=0)) != len(X):
        raise ConstructionError("inputs must be distinct hypercube points")


def bad_simln_xor(dataset: LabeledDataset, ln_eps: float, delta: Optional[float] = None):
    """Memorizer with neuron i firing at exactly 2 eps on x_i and nowhere else."""
    X, y = dataset.inputs, dataset.labels
    _check_cube(X)
    n, d = X.shape
    # x_i . x_i - x_i . x >= 2 for every other vertex x
    delta = 2.0 * SLACK_FRACTION if delta is None else delta
    if not 0 < delta < 2:
        raise SlackTooLargeError("delta must lie in (0, 2)")
    W1 = 2.0 * ln_eps * X / delta
    b1 = np.full(n, 2.0 * ln_eps * (-d + delta) / delta)
    return ArchSpec("SimLN", n, d, ln_epsilon=ln_eps), ModelParams([W1, y.copy()], b1)


def good_simln_xor(d: int, ln_eps: float, m: int = 4):
    rows, signs = xor_pattern_rows(d, 2.0 * ln_eps)
    W1, b1, W2 = _pad(m, rows, np.full(4, -2.0 * ln_eps), signs)
    return ArchSpec("SimLN", m, d, ln_epsilon=ln_eps), ModelParams([W1, W2], b1)


def good_sbn_xor(dataset: LabeledDataset, first_layer_scale: float = 1.0, m: int = 4):
    """Four pattern detectors with |gamma| = |W2| = 1/sqrt(2).

    The label sign sits on W2 so that gamma * W2 = +-1/2; together with the
    RMS denominator s/2 of each detector this reproduces x1 * x2.
    """
    if not is_complete_xor_set(dataset):
        warnings.warn("dataset does not satisfy the complete training set condition",
                      PreconditionWarning)
    s = first_layer_scale
    d = dataset.d
    rows, signs = xor_pattern_rows(d, s)
    h = 1.0 / math.sqrt(2.0)
    W1, b1, W2, gamma = _pad(m, rows, np.full(4, -s), signs * h, np.full(4, h))
    return ArchSpec("SimBN", m, d), ModelParams([W1, W2], b1, gamma)


def good_polygon(dataset: LabeledDataset, s: int, eps: Optional[float] = None,
                 m: Optional[int] = None):
    """One neuron per distinct head value v = x[:s].

    Neuron j reads only the head coordinates, fires at level r_j on v_j and
    is dead on every other head; r_j^2 = |y_j| sqrt(R^2 + 1).
    """
    X, y = dataset.inputs, dataset.labels
    R = np.linalg.norm(X, axis=1)
    if not np.allclose(R, R[0]):
        raise ConstructionError("inputs must share a common norm R")
    heads, inv = np.unique(X[:, :s], axis=0, return_inverse=True)
    inv = np.ravel(inv)
    k = len(heads)
    yk = np.empty(k)
    for j in range(k):
        ys = y[inv == j]
        if not np.all(ys == ys[0]):
            raise ConstructionError(f"inconsistent labels for head value {heads[j]}")
        yk[j] = ys[0]
    Wh, mu = find_separators(heads)
    eps = _pick_slack(eps, mu)
    r = np.sqrt(np.abs(yk) * math.sqrt(R[0] ** 2 + 1.0))
    rows = np.zeros((k, X.shape[1]))
    rows[:, :s] = (r / eps)[:, None] * Wh
    b = r * (-np.sum(Wh * heads, axis=1) + eps) / eps
    W2 = np.divide(yk, r, out=np.zeros(k), where=r > 0)
    W1, b1, W2 = _pad(k if m is None else m, rows, b, W2)
    return ArchSpec("Bias", W1.shape[0], X.shape[1]), ModelParams([W1, W2], b1)


def _unit(phi):
    return np.array([math.cos(phi), math.sin(phi)])


def good_circle(dataset: LabeledDataset, variant: str = "chord"):
    """Per-arc neurons for inputs whose first two coordinates lie on the unit circle.

    After sorting by angle, z_i is the midpoint of arc (v_{i-1}, v_i).  With
    ``variant="chord"`` w_i is the unit normal of chord z_i z_{i+1} and
    neuron i vanishes on that chord; with ``"centered"`` w_i = v_i and the
    neuron vanishes at the nearer of z_i, z_{i+1}, so |f| <= max |y|.
    Either way neuron i is positive only on arc (z_i, z_{i+1}) and equals
    r_i at v_i, so the training activations are one-hot.
    """
    if variant not in ("chord", "centered"):
        raise ConstructionError(f"unknown circle variant {variant!r}")
    X, y = dataset.inputs, dataset.labels
    n = len(X)
    if n < 3:
        raise ConstructionError("need at least 3 points")
    if not np.allclose(np.hypot(X[:, 0], X[:, 1]), 1.0):
        raise ConstructionError("first two coordinates must lie on the unit circle")
    R = np.linalg.norm(X, axis=1)
    if not np.allclose(R, R[0]):
        raise ConstructionError("inputs must share a common norm R")
    phi = np.mod(np.arctan2(X[:, 1], X[:, 0]), 2 * np.pi)
    order = np.argsort(phi)
    ps = phi[order]
    gaps = np.diff(np.concatenate([ps, [ps[0] + 2 * np.pi]]))
    if np.any(gaps <= 1e-12):
        raise ConstructionError("duplicate angles")
    # z[i] sits between sorted points i-1 and i
    zang = ps - 0.5 * np.roll(gaps, 1)
    r = np.sqrt(np.abs(y) * math.sqrt(R[0] ** 2 + 1.0))
    W1 = np.zeros_like(X)
    b1 = np.zeros(n)
    W2 = np.zeros(n)
    for t, i in enumerate(order):
        lo, hi = zang[t], zang[(t + 1) % n] + (2 * np.pi if t == n - 1 else 0.0)
        if variant == "chord":
            w = _unit(0.5 * (lo + hi))
            c = math.cos(0.5 * (hi - lo))
        else:
            w = X[i, :2]
            c = math.cos(min(ps[t] - lo, hi - ps[t]))
        lift = float(w @ X[i, :2]) - c
        if r[i] == 0:
            continue
        W1[i, :2] = r[i] * w / lift
        b1[i] = -r[i] * c / lift
        W2[i] = y[i] / r[i]
    return ArchSpec("Bias", n, X.shape[1]), ModelParams([W1, W2], b1)


def hidden_activations(spec: ArchSpec, params: ModelParams, X):
    """Post-activation matrices (n x m) for every hidden layer (ReLU nets)."""
    X = np.asarray(X, dtype=np.float64)
    z = X @ params.W1.T
    if params.b1 is not None:
        z = z + params.b1
    acts = [np.maximum(z, 0.0)]
    for Wk in params.W[1:-1]:
        acts.append(np.maximum(acts[-1] @ Wk.T, 0.0))
    return acts


def is_one_hot(spec: ArchSpec, params: ModelParams, dataset: LabeledDataset) -> bool:
    """Each nonzero-label input activates exactly one neuron per layer, injectively."""
    keep = dataset.labels != 0
    for A in hidden_activations(spec, params, dataset.inputs[keep]):
        active = A > 0
        if not np.all(active.sum(axis=1) == 1):
            return False
        owners = np.argmax(active, axis=1)
        if len(np.unique(owners)) != len(owners):
            return False
    return True


@dataclass
class ConstructionCertificate:
    name: str
    interpolation_residual: float
    achieved_trace: float
    theoretical_min: Optional[float]
    relative_gap: float
    generalization: float
    off_support_zero_fraction: float
    fd_trace: Optional[float] = None
    note: str = ""

    FIELDS = ("name", "interpolation_residual", "achieved_trace", "fd_trace", "theoretical_min",
              "relative_gap", "generalization", "off_support_zero_fraction", "note")

    def csv_row(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


def off_support_zero_fraction(spec, params, train: LabeledDataset, X_eval, tol=1e-9) -> float:
    seen = {r.tobytes() for r in np.ascontiguousarray(train.inputs)}
    X_eval = np.ascontiguousarray(X_eval, dtype=np.float64)
    mask = np.array([r.tobytes() not in seen for r in X_eval], dtype=bool)
    if not mask.any():
        return float("nan")
    out = evaluate(spec, params, X_eval[mask], reference=train.inputs)
    return float(np.mean(np.abs(out) < tol))


def certify(name: str, spec: ArchSpec, params: ModelParams, train: LabeledDataset,
            eval_set: Optional[LabeledDataset] = None, loss: LossKind = MSE,
            with_fd: bool = False, tmin: Optional[float] = None,
            metric: str = "zero-one") -> ConstructionCertificate:
    """Residual, sharpness vs. the theoretical minimum, and test behavior."""
    res = interpolation_residual(spec, params, train, loss)
    achieved = exact_trace(spec, params, train, loss, tol=np.inf)
    if tmin is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", PreconditionWarning)
            tmin = theoretical_min(spec, train, loss)
    gap = abs(achieved - tmin) / max(tmin, 1e-12) if tmin is not None else float("nan")
    fd = full_fd_trace(loss_closure(spec, train, loss), params.flatten()) if with_fd else None
    gen = float("nan")
    off = float("nan")
    if eval_set is not None:
        if metric == "zero-one":
            gen = zero_one_error(spec, params, eval_set, reference=train)
        else:
            out = evaluate(spec, params, eval_set.inputs, reference=train.inputs)
            gen = float(np.mean((out - eval_set.labels) ** 2))
        off = off_support_zero_fraction(spec, params, train, eval_set.inputs)
    return ConstructionCertificate(name, res, achieved, tmin, gap, gen, off, fd)


def xor_dataset_from(X) -> LabeledDataset:
    return LabeledDataset(X, xor_labels(X), "xor-hypercube")
