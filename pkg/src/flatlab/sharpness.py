"""Trace-of-Hessian sharpness: closed form at interpolation plus two oracles."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import _kernels as K
from .data import LabeledDataset, is_complete_xor_set
from .losses import MSE, LossKind, interpolation_targets, loss_array, loss_derivatives, training_targets
from .models import ArchSpec, ModelParams, evaluate, jacobian, refresh_batch_context

DEFAULT_TOL = 1e-3
MAX_FD_PARAMS = 50_000


class SharpnessError(ValueError):
    pass


class NotInterpolatingError(SharpnessError):
    def __init__(self, residual, tol):
        super().__init__(f"parameters do not interpolate: residual {residual:.3e} > tol {tol:.1e}")
        self.residual = residual


class PreconditionWarning(UserWarning):
    """A closed-form minimum was evaluated outside its stated hypotheses."""


@dataclass
class SharpnessReport:
    exact_trace: Optional[float]
    oracle_trace: float
    oracle_kind: str
    theoretical_min: Optional[float]
    path_norm: Optional[float]
    interpolation_residual: float
    oracle_stderr: float = 0.0

    FIELDS = ("exact_trace", "oracle_trace", "oracle_kind", "oracle_stderr",
              "theoretical_min", "path_norm", "interpolation_residual")

    def csv_row(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


def _theta(spec, params):
    return params.flatten() if isinstance(params, ModelParams) else np.asarray(params, float)


def interpolation_residual(spec: ArchSpec, params, dataset: LabeledDataset,
                           loss: LossKind = MSE) -> float:
    out = evaluate(spec, params, dataset.inputs)
    return float(np.max(np.abs(out - interpolation_targets(loss, dataset.labels))))


def jacobian_sq_norms(spec: ArchSpec, params, dataset: LabeledDataset) -> np.ndarray:
    """Per-example squared gradient norms ||d f(x_i) / d theta||^2."""
    ctx = refresh_batch_context(spec, params, dataset) if spec.kind == "SimBN" else None
    _, J = jacobian(spec, params, dataset.inputs, ctx)
    return np.einsum("ij,ij->i", J, J)


def jac_surrogate(spec: ArchSpec, params, dataset: LabeledDataset) -> float:
    """(2/n) sum ||grad f||^2; equals the MSE trace only at interpolation."""
    return float(2.0 * np.mean(jacobian_sq_norms(spec, params, dataset)))


def exact_trace(spec: ArchSpec, params, dataset: LabeledDataset, loss: LossKind = MSE,
                tol: float = DEFAULT_TOL) -> float:
    """Trace of the training-loss Hessian for an interpolating model.

    At interpolation the residual term of the Hessian vanishes and the trace
    reduces to mean_i loss''(target_i) ||grad f(x_i)||^2: factor 2 for MSE,
    p(1 - p) for label-smoothed logistic loss.
    """
    if loss.variant == "truncated":
        raise SharpnessError("the interpolation identity is only available for mse and logistic losses")
    res = interpolation_residual(spec, params, dataset, loss)
    if res > tol:
        raise NotInterpolatingError(res, tol)
    curv = _curvatures(loss, dataset.labels)
    return float(np.mean(curv * jacobian_sq_norms(spec, params, dataset)))


def _curvatures(loss, labels):
    targets = interpolation_targets(loss, labels)
    fed = training_targets(loss, labels)
    return np.array([loss_derivatives(loss, a, b)[1] for a, b in zip(targets, fed)])


def loss_closure(spec: ArchSpec, dataset: LabeledDataset, loss: LossKind = MSE) -> Callable:
    """theta -> training loss; SimBN statistics follow theta."""
    X = dataset.inputs
    t = training_targets(loss, dataset.labels)

    def L(theta):
        return float(np.mean(loss_array(loss, evaluate(spec, theta, X), t)))

    return L


def grad_closure(spec: ArchSpec, dataset: LabeledDataset, loss: LossKind = MSE,
                 stop_gradient: bool = False) -> Callable:
    X = np.ascontiguousarray(dataset.inputs)
    t = np.ascontiguousarray(training_targets(loss, dataset.labels))
    codes = spec.codes()

    def G(theta):
        g = np.empty(spec.n_params)
        K.full_loss_grad(np.ascontiguousarray(theta, dtype=np.float64), X, t, *codes,
                         loss.code, float(loss.param), stop_gradient, g)
        return g

    return G


def full_fd_trace(loss_closure: Callable, params_flat, h: float = 1e-3) -> float:
    """Sum of central second differences along every coordinate.

    The step on coordinate k is h * (1 + |theta_k|).
    """
    theta = np.asarray(params_flat, dtype=np.float64)
    P = theta.shape[0]
    if P > MAX_FD_PARAMS:
        raise SharpnessError(f"{P} parameters exceed the finite-difference budget {MAX_FD_PARAMS}")
    L0 = loss_closure(theta)
    terms = np.empty(P)
    probe = theta.copy()
    for k in range(P):
        hk = h * (1.0 + abs(theta[k]))
        probe[k] = theta[k] + hk
        up = loss_closure(probe)
        probe[k] = theta[k] - hk
        down = loss_closure(probe)
        probe[k] = theta[k]
        terms[k] = (up - 2.0 * L0 + down) / (hk * hk)
    if not np.all(np.isfinite(terms)) or not math.isfinite(L0):
        raise SharpnessError("non-finite loss value during finite differencing")
    return float(np.sum(terms))


def hutchinson_trace(grad_closure: Callable, params_flat, n_probes: int = 32,
                     h: float = 1e-4, seed=0):
    """Rademacher estimate of tr(H) with Hv from central gradient differences.

    Returns (estimate, standard error).
    """
    if n_probes < 8:
        raise SharpnessError("need at least 8 probes")
    theta = np.asarray(params_flat, dtype=np.float64)
    streams = np.random.SeedSequence(seed).spawn(n_probes)
    quad = np.empty(n_probes)
    for i, ss in enumerate(streams):
        v = np.random.default_rng(ss).choice(np.array([-1.0, 1.0]), size=theta.shape[0])
        Hv = (grad_closure(theta + h * v) - grad_closure(theta - h * v)) / (2.0 * h)
        quad[i] = v @ Hv
    return float(np.mean(quad)), float(np.std(quad, ddof=1) / math.sqrt(n_probes))


def _augmented_norms(X):
    return np.sqrt(np.sum(np.asarray(X) ** 2, axis=1) + 1.0)


def _extreme_on_sphere(X):
    r = np.linalg.norm(X, axis=1)
    return np.allclose(r, r[0]) and len(np.unique(X, axis=0)) == len(X)


def theoretical_min(spec: ArchSpec, dataset: LabeledDataset, loss: LossKind = MSE) -> Optional[float]:
    """Infimum of the sharpness over interpolating parameters, if known.

    Bias (depth D): mean_i loss'' * D |t_i|^(2(D-1)/D) ||x_i'||^(2/D).
    SimLN: mean_i loss'' * min(1, (2/eps) ||x_i'|| |t_i|).
    SimBN on a complete xor set: loss'' * 4 |t| (twice the minimal
    ||gamma||^2 + ||W2||^2).  NoBias has no closed form and yields None.
    Hypotheses that cannot be confirmed raise a PreconditionWarning.
    """
    if spec.kind == "NoBias" or loss.variant == "truncated":
        return None
    X = dataset.inputs
    t = np.abs(interpolation_targets(loss, dataset.labels))
    curv = _curvatures(loss, dataset.labels)
    if spec.kind == "SimBN":
        if not is_complete_xor_set(dataset):
            warnings.warn("SimBN minimum is derived for complete xor sets only", PreconditionWarning)
        return float(4.0 * np.mean(curv * t))
    if len(np.unique(X, axis=0)) != len(X):
        warnings.warn("inputs contain duplicates; not a set of extreme points", PreconditionWarning)
    elif not _extreme_on_sphere(X):
        warnings.warn("extreme-point property not verified for off-sphere inputs", PreconditionWarning)
    xn = _augmented_norms(X)
    if spec.kind == "Bias":
        D = spec.depth
        per = D * t ** (2.0 * (D - 1) / D) * xn ** (2.0 / D)
    else:
        per = np.minimum(1.0, 2.0 / spec.ln_epsilon * xn * t)
        per[t == 0] = 0.0
    return float(np.mean(curv * per))


def path_norm(params: ModelParams) -> float:
    """sum_j ||[W1_j, b1_j]|| |W2_j| for depth-2 models."""
    if len(params.W) != 2:
        raise SharpnessError("path norm is defined for depth-2 models only")
    rows = params.W1 if params.b1 is None else np.column_stack([params.W1, params.b1])
    return float(np.sum(np.linalg.norm(rows, axis=1) * np.abs(params.W2)))


def sharpness_report(spec: ArchSpec, params, dataset: LabeledDataset, loss: LossKind = MSE,
                     oracle: str = "full-fd", tol: float = DEFAULT_TOL, n_probes: int = 32,
                     seed=0) -> SharpnessReport:
    theta = _theta(spec, params)
    res = interpolation_residual(spec, theta, dataset, loss)
    exact = None
    if res <= tol and loss.variant != "truncated":
        exact = exact_trace(spec, theta, dataset, loss, tol)
    se = 0.0
    if oracle == "full-fd":
        value = full_fd_trace(loss_closure(spec, dataset, loss), theta)
    elif oracle == "hutchinson":
        value, se = hutchinson_trace(grad_closure(spec, dataset, loss), theta, n_probes, seed=seed)
        oracle = f"hutchinson({n_probes})"
    else:
        raise SharpnessError(f"unknown oracle {oracle!r}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PreconditionWarning)
        tmin = theoretical_min(spec, dataset, loss)
    pn = path_norm(ModelParams.unflatten(spec, theta)) if spec.depth == 2 else None
    return SharpnessReport(exact, value, oracle, tmin, pn, res, se)
