"""Two-layer (and deep Bias) ReLU/Softplus networks with exact gradients.

Gradients are hand-derived in :mod:`flatlab._kernels`; this module wraps
them around structured parameter bundles.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels as K

KINDS = ("NoBias", "Bias", "SimBN", "SimLN")
ACTIVATIONS = ("relu", "softplus")
INIT_MODES = ("uniform", "he", "simln-downscale")
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}
_ACT_CODE = {a: i for i, a in enumerate(ACTIVATIONS)}


class ModelError(ValueError):
    """Shape or configuration problem with a model."""


@dataclass(frozen=True)
class ArchSpec:
    kind: str
    width: int
    input_dim: int
    depth: int = 2
    activation: str = "relu"
    ln_epsilon: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown architecture {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")
        if self.depth < 2:
            raise ModelError("depth must be >= 2")
        if self.depth > 2 and self.kind != "Bias":
            raise ModelError(f"{self.kind} supports depth 2 only")
        if self.kind == "SimLN" and not self.ln_epsilon > 0:
            raise ModelError("SimLN needs ln_epsilon > 0")
        if self.width < 1 or self.input_dim < 1:
            raise ModelError("width and input_dim must be positive")

    @property
    def n_params(self) -> int:
        return int(K.n_params(_KIND_CODE[self.kind], self.width, self.input_dim, self.depth))

    def codes(self):
        """Positional arguments shared by every kernel call."""
        return (_KIND_CODE[self.kind], _ACT_CODE[self.activation], self.width,
                self.input_dim, self.depth, float(self.ln_epsilon))


@dataclass
class ModelParams:
    """Weights W[0] = W1 (m x d), ..., W[-1] = W_D (length m); b1; gamma."""

    W: list
    b1: Optional[np.ndarray] = None
    gamma: Optional[np.ndarray] = None

    def flatten(self) -> np.ndarray:
        parts = [np.ravel(self.W[0])]
        if self.b1 is not None:
            parts.append(np.ravel(self.b1))
        if self.gamma is not None:
            parts.append(np.ravel(self.gamma))
        parts.extend(np.ravel(w) for w in self.W[1:])
        return np.concatenate(parts).astype(np.float64)

    @classmethod
    def unflatten(cls, spec: ArchSpec, theta) -> "ModelParams":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (spec.n_params,):
            raise ModelError(f"expected {spec.n_params} parameters, got {theta.shape}")
        m, d = spec.width, spec.input_dim
        off = m * d
        W = [theta[:off].reshape(m, d).copy()]
        b1 = gamma = None
        if spec.kind != "NoBias":
            b1 = theta[off:off + m].copy()
            off += m
        if spec.kind == "SimBN":
            gamma = theta[off:off + m].copy()
            off += m
        for _ in range(spec.depth - 2):
            W.append(theta[off:off + m * m].reshape(m, m).copy())
            off += m * m
        W.append(theta[off:off + m].copy())
        return cls(W, b1, gamma)

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.W],
                           None if self.b1 is None else self.b1.copy(),
                           None if self.gamma is None else self.gamma.copy())

    @property
    def W1(self):
        return self.W[0]

    @property
    def W2(self):
        return self.W[-1]


def check_params(spec: ArchSpec, params: ModelParams) -> None:
    m, d = spec.width, spec.input_dim
    if len(params.W) != spec.depth:
        raise ModelError(f"expected {spec.depth} weight matrices, got {len(params.W)}")
    if np.shape(params.W[0]) != (m, d):
        raise ModelError(f"W1 has shape {np.shape(params.W[0])}, expected {(m, d)}")
    for w in params.W[1:-1]:
        if np.shape(w) != (m, m):
            raise ModelError("hidden weight matrices must be m x m")
    if np.shape(params.W[-1]) != (m,):
        raise ModelError(f"last layer must have shape ({m},)")
    if (params.b1 is None) != (spec.kind == "NoBias"):
        raise ModelError("b1 must be present exactly when the architecture has a bias")
    if params.b1 is not None and np.shape(params.b1) != (m,):
        raise ModelError("b1 must have length m")
    if (params.gamma is None) != (spec.kind != "SimBN"):
        raise ModelError("gamma must be present exactly for SimBN")
    if params.gamma is not None and np.shape(params.gamma) != (m,):
        raise ModelError("gamma must have length m")


@dataclass
class BatchContext:
    """SimBN per-channel RMS denominators over a reference dataset.

    ``moments[j]`` holds mean_k act(z_kj) act'(z_kj) [x_k, 1], which carries
    the gradient of ``denominators[j]`` with respect to the first layer.
    """

    denominators: np.ndarray
    moments: np.ndarray
    reference: np.ndarray = field(repr=False)
    stop_gradient: bool = False


_EMPTY_A = np.zeros(0)
_EMPTY_M = np.zeros((0, 0))


def _as_theta(spec, params):
    if isinstance(params, ModelParams):
        check_params(spec, params)
        return params.flatten()
    theta = np.ascontiguousarray(params, dtype=np.float64)
    if theta.shape != (spec.n_params,):
        raise ModelError(f"expected {spec.n_params} parameters, got {theta.shape}")
    return theta


def _ctx_arrays(spec, ctx):
    if spec.kind != "SimBN":
        return _EMPTY_A, _EMPTY_M, False
    if ctx is None:
        raise ModelError("SimBN evaluation needs a BatchContext")
    if ctx.denominators.shape != (spec.width,):
        raise ModelError("BatchContext width does not match the architecture")
    return ctx.denominators, ctx.moments, ctx.stop_gradient


def _as_input(spec, x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape[-1] != spec.input_dim:
        raise ModelError(f"input dimension {x.shape[-1]} != {spec.input_dim}")
    return x


def refresh_batch_context(spec: ArchSpec, params, dataset, stop_gradient=False) -> BatchContext:
    if spec.kind != "SimBN":
        raise ModelError("batch statistics exist only for SimBN")
    if spec.width < 1:
        raise ModelError("zero-width network")
    theta = _as_theta(spec, params)
    X = _as_input(spec, getattr(dataset, "inputs", dataset))
    a = np.zeros(spec.width)
    M = np.zeros((spec.width, spec.input_dim + 1))
    arch, act, m, d, _, _ = spec.codes()
    K.sbn_stats(theta, X, arch, act, m, d, a, M)
    return BatchContext(a, M, X, stop_gradient)


def forward(spec: ArchSpec, params, x, ctx: Optional[BatchContext] = None) -> float:
    theta = _as_theta(spec, params)
    a, _, _ = _ctx_arrays(spec, ctx)
    x = _as_input(spec, x)
    arch, act, m, d, depth, eps = spec.codes()
    return float(K.forward(theta, x, arch, act, m, d, depth, eps, a))


def forward_batch(spec: ArchSpec, params, X, ctx: Optional[BatchContext] = None) -> np.ndarray:
    theta = _as_theta(spec, params)
    a, _, _ = _ctx_arrays(spec, ctx)
    X = _as_input(spec, np.atleast_2d(X))
    return K.batch_forward(theta, X, *spec.codes(), a)


def per_example_grad(spec: ArchSpec, params, x, ctx: Optional[BatchContext] = None) -> np.ndarray:
    """Gradient of the scalar output with respect to the flat parameters."""
    theta = _as_theta(spec, params)
    a, M, stop = _ctx_arrays(spec, ctx)
    x = _as_input(spec, x)
    g = np.zeros(theta.shape[0])
    K.value_and_grad(theta, x, *spec.codes(), a, M, stop, g)
    return g


def jacobian(spec: ArchSpec, params, X, ctx: Optional[BatchContext] = None):
    """Outputs and per-example gradients (n x P) for every row of X."""
    theta = _as_theta(spec, params)
    a, M, stop = _ctx_arrays(spec, ctx)
    X = _as_input(spec, np.atleast_2d(X))
    return K.batch_jacobian(theta, X, *spec.codes(), a, M, stop)


def evaluate(spec: ArchSpec, params, X, reference=None) -> np.ndarray:
    """Outputs on X; SimBN statistics come from ``reference`` (default X)."""
    ctx = None
    if spec.kind == "SimBN":
        ref = X if reference is None else reference
        ctx = refresh_batch_context(spec, params, ref)
    return forward_batch(spec, params, X, ctx)


def init_params(spec: ArchSpec, scale_mode: str = "uniform", seed=0) -> ModelParams:
    """Random initialization.

    ``"uniform"``: every layer U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual
    framework default.  ``"he"``: Gaussian with std sqrt(2 / fan_in).
    ``"simln-downscale"``: uniform with W1 and b1 divided by 100.  Biases
    use the first layer's fan-in; SimBN scales start at one.
    """
    if scale_mode not in INIT_MODES:
        raise ModelError(f"unknown scale mode {scale_mode!r}")
    rng = np.random.default_rng(seed)
    m, d = spec.width, spec.input_dim

    def draw(shape, fan_in):
        if scale_mode == "he":
            return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    W = [draw((m, d), d)]
    b1 = draw(m, d) if spec.kind != "NoBias" else None
    for _ in range(spec.depth - 2):
        W.append(draw((m, m), m))
    W.append(draw(m, m))
    gamma = np.ones(m) if spec.kind == "SimBN" else None
    if scale_mode == "simln-downscale":
        W[0] = W[0] / 100.0
        if b1 is not None:
            b1 = b1 / 100.0
    return ModelParams(W, b1, gamma)


def zeros_like(spec: ArchSpec) -> ModelParams:
    return ModelParams.unflatten(spec, np.zeros(spec.n_params))


def write_checkpoint(spec: ArchSpec, params, path) -> None:
    theta = _as_theta(spec, params)
    with open(path, "w") as fh:
        fh.write(f"arch={spec.kind} depth={spec.depth} m={spec.width} d={spec.input_dim} "
                 f"act={spec.activation} ln_eps={spec.ln_epsilon:.17g}\n")
        for v in theta:
            fh.write(f"{v:.17g}\n")


def read_checkpoint(path):
    with open(path) as fh:
        header = fh.readline().split()
        values = np.array([float(line) for line in fh if line.strip()])
    kv = dict(item.split("=", 1) for item in header)
    spec = ArchSpec(kind=kv["arch"], width=int(kv["m"]), input_dim=int(kv["d"]),
                    depth=int(kv["depth"]), activation=kv["act"],
                    ln_epsilon=float(kv["ln_eps"]))
    return spec, ModelParams.unflatten(spec, values)
